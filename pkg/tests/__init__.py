"""
Unit tests for histoforge.
"""
