"""Segmentation-first instance segmentation at desk scale."""
