"""
Sparse operator assembly for the Box Method.
"""
