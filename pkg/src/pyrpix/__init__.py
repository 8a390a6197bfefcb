"""Pixel-context attention (PPCA) networks, hybrid contrastive training and their verification tools."""

__version__ = "0.1.0"
