"""Two-stage MPC energy management for interconnected microgrids.

Stage I computes each microgrid's optimal islanded operation; Stage II
determines inter-microgrid power exchange, either centrally or by a
consensus-based distributed augmented-Lagrangian algorithm that keeps
every microgrid's cost at or below its islanded cost.
"""

from ._qp_backend import DEFAULT_BACKEND as qp_backend

__version__ = "0.1.0"
__all__ = ["qp_backend", "__version__"]
