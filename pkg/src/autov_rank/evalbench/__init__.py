"""Planted-truth benchmark: synthetic data, baseline strategies, metrics."""
