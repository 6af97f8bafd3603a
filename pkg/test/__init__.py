"""Test package for desk3d."""
