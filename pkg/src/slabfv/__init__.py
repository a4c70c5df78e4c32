"""Upwind finite volume scheme for a compressible, heat-conducting viscous
gas in a periodic slab, plus the diagnostics that certify a computed run.

Submodules are imported explicitly (slabfv.grid, slabfv.scheme, ...) rather
than re-exported here; the CLI must be able to pin BLAS thread counts via
environment variables before anything pulls in numpy.
"""

__version__ = "0.1.0"
