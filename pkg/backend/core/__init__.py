"""Partition kernel core modules package."""
