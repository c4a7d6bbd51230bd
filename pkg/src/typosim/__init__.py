"""Desk-scale simulator of typographic sticker attacks on a semantic-map pick-and-place agent."""

__version__ = "0.1.0"
