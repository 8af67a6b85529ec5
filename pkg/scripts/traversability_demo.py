"""Mean free path of the built-in worlds, swept over obstacle density.

Usage: python scripts/traversability_demo.py [--trials 20000]
"""

import argparse

import numpy as np

from irbl import sim


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=20_000)
    args = ap.parse_args()

    print("scenario            obstacles   tau [m]")
    for scenario, kw in (
        ("circle", {}),
        ("circle_obstacles", {"n_obstacles": 4}),
        ("circle_obstacles", {"n_obstacles": 8}),
        ("circle_obstacles", {"n_obstacles": 16}),
        ("forest", {"forest_count": 10}),
        ("forest", {"forest_count": 22}),
    ):
        cfg = {"scenario": scenario, "N": 2, **kw}
        world = sim.build_world(cfg, seed=0)
        tau = sim.traversability(world, args.trials, rng=np.random.default_rng(1))
        count = kw.get("n_obstacles", kw.get("forest_count", 0))
        print(f"{scenario:<20} {count:>6d}   {tau:8.3f}")
    print("\ndenser fields shorten the mean free path monotonically")


if __name__ == "__main__":
    main()
