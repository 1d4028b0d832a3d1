"""
Test modules for the Rhie-Chow Box Method package.
"""
