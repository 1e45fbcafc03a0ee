"""Unseen-speaker video-to-speech synthesis with speech-visage feature selection."""

__version__ = "0.1.0"
