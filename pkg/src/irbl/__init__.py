"""iRBL: communication-free multi-robot navigation in 3D.

Rule-based Lloyd iterations over buffered Voronoi cells restricted to a
sensing field of view, tracked by a receding-horizon controller.
"""

from irbl.sim import build_world, default_config, report_json, run_scenario

__version__ = "0.1.0"

__all__ = [
    "build_world",
    "default_config",
    "report_json",
    "run_scenario",
    "__version__",
]
