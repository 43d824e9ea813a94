"""Build multi-turn code-translation dialogues with compiler-verified outputs."""

__version__ = "0.1.0"
