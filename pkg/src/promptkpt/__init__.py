"""Promptable multi-object keypoint detection at desk scale."""

__version__ = "0.1.0"
