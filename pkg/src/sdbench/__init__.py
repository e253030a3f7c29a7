"""Statistical downscaling benchmark on paired coarse/fine daily grids."""

__version__ = "0.1.0"
