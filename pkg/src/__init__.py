"""
Rhie-Chow Box Method for the Stokes problem.
"""
