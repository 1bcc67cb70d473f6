"""Cross-domain trajectory prediction with a dual trajectory transformer and meta-learning."""
__version__ = "0.1.0"
