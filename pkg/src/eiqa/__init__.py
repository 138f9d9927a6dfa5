"""Preference-guided debiasing for no-reference enhancement image quality assessment."""

__version__ = "0.1.0"
