"""csou: unmixing of closely spaced point sources from coarse-pixel images."""

__version__ = "0.1.0"
