"""Signal-level CAN intrusion detection with multi-view convolutional autoencoders."""

__version__ = "0.1.0"
