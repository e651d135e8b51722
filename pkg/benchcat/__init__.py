"""Adaptive evaluation of models with item response theory."""
