"""Cross-modality image translation toolkit.

Pipeline stages: synthetic phantom corpus generation, volume/slice IO and
preprocessing, adversarial translator training, image quality metrics,
multichannel segmentation, and weighted deformation-fusion registration.
"""

__version__ = "0.1.0"
