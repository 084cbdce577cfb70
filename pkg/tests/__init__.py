"""Tests for PADDIT."""
