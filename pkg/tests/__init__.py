"""Test package init required for pytest."""
