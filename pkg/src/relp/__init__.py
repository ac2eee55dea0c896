"""Relevance patching and friends on a toy transformer."""
