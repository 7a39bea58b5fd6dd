"""Decoupled static/motion contrastive pretraining for video encoders, at desk scale."""

__version__ = "0.1.0"
