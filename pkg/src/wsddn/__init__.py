"""Weakly supervised detection of synthetic shapes from image-level labels.

Region proposals are scored by two softmax streams (what class / which
region) whose product yields per-region detection scores; summing over
regions gives image-level class probabilities trained with a binary log
loss, no box supervision anywhere.
"""

__version__ = "0.1.0"
