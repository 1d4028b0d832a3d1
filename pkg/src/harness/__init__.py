"""
Manufactured-solution convergence harness.
"""
