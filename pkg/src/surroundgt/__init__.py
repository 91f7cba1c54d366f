"""Surround-view fisheye ground-truth toolkit.

Cubemap to fisheye remapping, instance/motion/flow ground truth from 3D
boxes and poses, event remapping, BEV projection and dataset statistics.
"""

__version__ = "0.1.0"
