"""FNSF - fast runtime scene flow with a distance-transform loss."""

__version__ = "0.3.0"
