"""Forward-looking MIMO SAR simulation, back-projection and velocity autofocus."""

__version__ = "0.1.0"
