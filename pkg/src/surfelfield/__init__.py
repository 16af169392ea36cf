"""surfelfield: Gaussian-surfel geometry-field rendering and reconstruction.

Closed-form footprint compositing with analytic gradients, brute-force
quadrature oracles certifying the closed forms, a color-propagation
continuity remedy, a synthetic-scene fitting loop, and TSDF mesh
extraction.
"""

__version__ = "0.1.0"
