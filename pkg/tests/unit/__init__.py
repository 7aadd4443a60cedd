"""
Unit Tests Package

Contains unit tests for individual functions and classes.
"""
