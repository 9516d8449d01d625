"""Embedding export from pretrained vision backbones into the binary
store format of the attribution toolkit."""

__version__ = "0.1.0"

from .extractor import ExtractSpec, extract, load_backbone, scan_dataset, write_store

__all__ = ["ExtractSpec", "extract", "load_backbone", "scan_dataset", "write_store"]
