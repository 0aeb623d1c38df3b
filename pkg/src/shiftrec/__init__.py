"""Sequential recommendation with category-driven motivation-shift modeling."""

__version__ = "0.1.0"
