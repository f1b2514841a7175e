"""Command-line handlers package."""
