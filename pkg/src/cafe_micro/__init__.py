"""Joint contrastive and autoregressive training of a toy multimodal decoder."""

__version__ = "0.1.0"
