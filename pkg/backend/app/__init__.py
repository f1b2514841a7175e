"""Random partition kernel toolkit: CLI application package."""

__version__ = "1.0.0"
