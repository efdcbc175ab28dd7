"""Factor-graph factuality assessment and feedback-driven correction of long-form answers."""

__version__ = "0.1.0"
