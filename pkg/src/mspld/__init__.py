"""Multi-model self-paced learning for few-example object detection, at desk scale."""

__version__ = "0.1.0"
