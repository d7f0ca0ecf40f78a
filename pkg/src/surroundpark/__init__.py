"""Surround-view automated-parking perception stack.

A desk-scale, end-to-end pipeline: a shared-encoder multi-task CNN
(semantic segmentation, grid object detection, camera-soiling detection)
built on a small reverse-mode autodiff core, trained with dynamically
balanced task losses; an equidistant fisheye camera model mapping
detections to world coordinates; four-camera fusion into an ego-centered
occupancy map; and parking-slot detection, classification and selection.
"""

from .autodiff import Adam, AdamState, Tape, Tensor, adam_step, backward

__version__ = "0.1.0"
