"""Incremental few-shot object detection with feed-forward class enrolment."""

__version__ = "0.1.0"
