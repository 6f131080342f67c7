"""DRAM correctable-error analysis and uncorrectable-error prediction toolkit."""

__version__ = "0.1.0"
