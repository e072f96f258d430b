"""Multi-branch transformer segmentation of brain tumour sub-regions (WT/TC/ET)."""

__version__ = "0.1.0"
