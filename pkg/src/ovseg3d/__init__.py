"""Open-vocabulary 3D instance segmentation with free-form language queries."""

__version__ = "0.1.0"
