"""Desk-scale domain adaptation pipeline: corpus cleaning, ratio-exact mixing,
knowledge injection, instruction tuning and multiple-choice evaluation."""

__version__ = "0.1.0"
