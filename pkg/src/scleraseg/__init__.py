"""Periocular detection and sclera segmentation with FCN8, SegNet and a conditional GAN."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
