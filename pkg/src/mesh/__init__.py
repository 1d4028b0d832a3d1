"""
Mesh package: primal Delaunay triangulations and their Voronoi box duals.
"""
