"""fragmix: feature-mixing descriptors for writer and page retrieval on fragments."""

__version__ = "0.1.0"
