"""Kinetic multiscale image segmentation."""
