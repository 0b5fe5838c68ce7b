"""Bumble bee species identification pipeline.

Dataset preparation, image augmentation, transfer-learning classifiers over
frozen CNN backbones, softmax-sum composite models, and the evaluation /
reporting machinery that goes with them.
"""

__version__ = "0.1.0"
