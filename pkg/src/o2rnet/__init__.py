"""Occlusion-aware two-stage detector for clustered objects.

Detects mutually occluding instances with an occluder/occludee head pair on
top of a region proposal network, using directional proposal expansion to
recover partially covered objects. Ships with synthetic clustered-scene
generation, VGG-annotator ingestion, box-consistent augmentation, training,
and COCO-style evaluation.
"""

__version__ = "0.1.0"
