"""Shift-equivalent U-Net segmentation with component-attention polyphase sampling."""

__version__ = "0.1.0"
