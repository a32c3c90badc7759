"""Structured pruning of small vision transformers."""
