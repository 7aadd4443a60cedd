"""Shared helpers: seeded random streams and host/formatting utilities."""
