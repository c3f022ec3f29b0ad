"""retouchlab: region-aware portrait retouching with sparse click guidance."""

__version__ = "0.1.0"
