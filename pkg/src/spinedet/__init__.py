"""Single-network vertebra labelling and instance segmentation for 3D CT."""

__version__ = "0.1.0"
