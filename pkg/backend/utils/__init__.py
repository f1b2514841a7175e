"""Utility functions package."""
