"""Hybrid MIDI-content song recommender with segment explanations."""

__version__ = "0.1.0"
