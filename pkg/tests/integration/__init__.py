"""
Integration Tests Package

Contains integration tests for component interactions.
"""
