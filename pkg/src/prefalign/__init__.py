"""Desk-scale multimodal RLHF pipeline."""
