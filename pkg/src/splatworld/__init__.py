"""Object-centric Gaussian-splat world models for demonstration augmentation."""

__version__ = "0.1.0"
