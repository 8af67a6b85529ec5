"""Median agent speed on the obstacle-free circle across sensor spans.

Reproduces the field-of-view ablation: for each preset, run several seeds and
report per-seed and pooled median average speeds.

Usage: python scripts/fov_ablation.py [--n 10] [--seeds 5] [--fovs full half 2d]
"""

import argparse

import numpy as np

from irbl import sim


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--delta", type=float, default=0.2)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--fovs", nargs="+", default=["full", "half", "2d"])
    args = ap.parse_args()

    medians = {}
    for fov in args.fovs:
        per_seed = []
        for seed in range(args.seeds):
            cfg = {"scenario": "circle", "N": args.n, "delta": args.delta, "fov": fov}
            rep = sim.run_scenario(cfg, seed=seed, tau_trials=10)
            vb = np.array([a.vbar for a in rep.agents])
            conv = sum(a.sr_conv for a in rep.agents)
            per_seed.append(float(np.median(vb)))
            print(
                f"{fov:>4} seed {seed}: median vbar {per_seed[-1]:.3f} m/s  "
                f"converged {conv}/{args.n}  t_end {rep.t_end:.1f} s",
                flush=True,
            )
        medians[fov] = float(np.median(per_seed))
        print(f"{fov:>4} median of medians {medians[fov]:.3f} m/s\n", flush=True)

    order = sorted(medians, key=medians.get, reverse=True)
    print("ordering:", " >= ".join(f"{f} ({medians[f]:.3f})" for f in order))


if __name__ == "__main__":
    main()
