"""Event and spatially-variant-exposure metrology of combustion particles."""

__version__ = "0.1.0"
