"""Fore-background contrast attention: blocks, neck, toy detection harness."""

__version__ = "0.1.0"
