"""Equivariant contrastive pretraining for 2.5D hand pose, in numpy."""

__version__ = "0.1.0"
