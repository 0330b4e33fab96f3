"""Tests for the fnsf package."""
