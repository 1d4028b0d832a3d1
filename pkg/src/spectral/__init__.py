"""
Spectral verification studies.
"""
