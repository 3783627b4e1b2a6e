"""Single-shot object detection with feature aggregation and enhancement, in numpy."""

__version__ = "0.1.0"
