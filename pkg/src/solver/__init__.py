"""
Saddle-point solvers.
"""
