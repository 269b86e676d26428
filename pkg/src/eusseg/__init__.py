"""Vision-transformer segmentation of tumors in endoscopic ultrasound frames."""

__version__ = "0.1.0"
