"""Invertible coupling constructions for bi-Lipschitz maps, with PCA model
reduction and a self-contained elliptic-PDE surrogate experiment."""

from . import constructor, flows, lifted, maps, neural, pca, pde

__all__ = ["flows", "constructor", "lifted", "pca", "neural", "pde", "maps"]
__version__ = "0.1.0"
