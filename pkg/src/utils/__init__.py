"""
Configuration utilities.
"""
