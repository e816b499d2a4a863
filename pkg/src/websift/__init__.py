"""Desk-scale toolkit for capturing web traffic through an inspection gateway,
labeling responses with malware intelligence sources, extracting static
HTML/JavaScript features, and training a random-forest classifier on them."""

__version__ = "0.1.0"
