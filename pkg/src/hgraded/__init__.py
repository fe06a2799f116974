"""H-matrix approximability of FEM inverses on graded meshes, plus
polynomial lifting and degree reduction on the reference simplex."""

__version__ = "0.1.0"
