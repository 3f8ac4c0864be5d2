"""Late-interaction page retrieval and staged prompting for multiple-choice questions over document images."""

__version__ = "0.1.0"
