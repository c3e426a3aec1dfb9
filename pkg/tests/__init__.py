"""Test suite for hierfdr."""
