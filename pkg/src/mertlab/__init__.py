"""Desk-scale masked-prediction music representation learning: DSP teachers, a
small waveform transformer, pretraining and frozen-feature probing."""

__version__ = "0.1.0"
