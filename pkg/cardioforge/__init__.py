"""Heart-sound (PCG / ECG) classification with augmentation and diffusion-generated training data."""

__version__ = "0.1.0"
