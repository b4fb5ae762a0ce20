"""Self-supervised representation learning with an adversarial lens that removes shortcut features."""

__version__ = "0.1.0"
