"""Desk-scale hybrid DNN-HMM speech recognizer and clean-label poisoning testbed."""

__version__ = "0.1.0"
