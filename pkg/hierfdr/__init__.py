"""Hierarchical FDR inference for high-dimensional AFT interaction models."""
