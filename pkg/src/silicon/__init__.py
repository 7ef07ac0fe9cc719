"""SiliCoN: simultaneous nuclei segmentation and stain color normalization."""

__version__ = "0.1.0"
