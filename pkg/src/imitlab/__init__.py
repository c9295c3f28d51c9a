"""Imitation learning with denoising-autoencoder uncertainty: active demonstration
requests, uncertainty-aware control, and failure prediction on 2D tasks."""

__version__ = "0.1.0"
