"""Desk-scale digital-twin pick-and-place benchtop.

Synthetic RGB-D perception builds a per-object twin store (mask, model
reference, 6-DoF pose); a tool-calling planner drives a simulated robot
through pick-and-place trials; the harness runs seeded experiment grids
and serves an interactive supervisor console.
"""

__version__ = "0.1.0"
