"""leafgrad: a small numpy deep-learning stack for leaf-disease imaging."""

__version__ = "0.1.0"
