"""Robot joint targets drawn as colored spheres in camera images, decoded back into joint actions."""

__version__ = "0.1.0"
