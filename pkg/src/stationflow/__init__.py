"""Station-level bike-share demand toolkit: features, graphs, models,
training harness, explanations and a what-if expansion service."""

__version__ = "0.1.0"
