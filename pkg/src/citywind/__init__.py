"""Urban wind simulation with a unified porosity model and design optimization."""

__version__ = "0.1.0"
