"""Navigation and pose tracking in learned voxel world models.

The package is organised bottom-up:

- ``geometry``: SE(3) / se(3), pinhole camera, planar agent state.
- ``voxel_map``: trilinear voxel grids (occupancy + colour) and their file format.
- ``renderer``: differentiable threshold-crossing RGB-D renderer and Laplace
  emission likelihood.
- ``map_learning``: fits a map to posed RGB-D images by gradient descent on the
  negative log-likelihood, with hand-written analytic gradients.
- ``simulator``: 2.5D floor-plan worlds, noisy planar dynamics, exact ray-cast
  ground-truth observations.
- ``tracking``: per-step MAP pose filtering against the rendered prediction
  (photometric + point-to-plane), plus a render-and-compare baseline.
- ``planning``: occupancy-slice A* with line-of-sight edges and a rotate-then-
  move waypoint controller.
- ``evaluation``: closed-loop episodes, SPL / RMSE metrics, runtime benchmarks.
- ``cli``: end-to-end command line (gen-world, capture, learn, track-eval,
  navigate, bench).
"""

__version__ = "0.1.0"
