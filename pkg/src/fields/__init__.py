"""
Nodal and box fields, the lumping map and discrete norms.
"""
