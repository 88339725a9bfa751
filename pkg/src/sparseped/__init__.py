"""Desk-scale teacher-student multispectral pedestrian detection under sparse box annotations."""

__version__ = "0.1.0"
