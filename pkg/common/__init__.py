"""Shared error types and seeding helpers."""
