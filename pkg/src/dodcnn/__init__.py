"""Multi-task event recognition with object detection outputs injected into the event branch.

A small numpy reverse-mode autodiff core drives a shared convolutional
backbone with three heads: event classification, rigid-object detection and
non-rigid-object detection. Detection feature maps of the top-scoring RoIs are
batch-pooled and concatenated into the event branch.
"""
__version__ = "0.1.0"
