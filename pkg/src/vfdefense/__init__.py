"""Visual-foresight defense testbed: detect adversarial attacks on a
pixel-input policy by comparing its action distribution on the observed
frame against its distribution on an action-conditioned predicted frame,
and act from the prediction when under attack."""

__version__ = "0.1.0"
