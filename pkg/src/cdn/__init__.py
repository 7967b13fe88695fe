"""Intervention-target identification from paired observational and interventional data."""

__version__ = "0.1.0"
