"""Multi-target masked point modeling with siamese decoders and a learnable codebook."""

__version__ = "0.1.0"
