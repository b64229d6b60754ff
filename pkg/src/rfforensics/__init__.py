"""Forensic workbench for RF-fingerprinting classifiers."""

__version__ = "0.1.0"
