"""Synthetic endoscopy scenes, trajectories and on-disk datasets."""
