"""Semantic-flow trajectory-pooled descriptors for near-miss video classification."""

__version__ = "0.1.0"

# Frame rate assumed when converting time-to-collision to frame counts.
NOMINAL_FPS = 10.0
