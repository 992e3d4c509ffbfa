"""Self- and cross-attention multimodal fusion on a small autodiff core."""
