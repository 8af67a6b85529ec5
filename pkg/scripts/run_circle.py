"""Antipodal circle exchange with the reference parameter set.

Usage: python scripts/run_circle.py [--n 10] [--fov half] [--seed 0] [--plot]
"""

import argparse

import numpy as np

from irbl import sim


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--fov", default="half", help="preset name or fx,fz,fa")
    ap.add_argument("--delta", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--obstacles", action="store_true")
    ap.add_argument("--plot", action="store_true", help="save circle_paths.png")
    args = ap.parse_args()

    fov = args.fov if args.fov in sim.FOV_PRESETS else [float(v) for v in args.fov.split(",")]
    cfg = {
        "scenario": "circle_obstacles" if args.obstacles else "circle",
        "N": args.n,
        "delta": args.delta,
        "fov": fov,
    }
    rep = sim.run_scenario(cfg, seed=args.seed)

    print(f"scenario {rep.scenario}  N={args.n}  fov={args.fov}  seed={args.seed}")
    print(f"tau {rep.tau:.3f} m   t_end {rep.t_end:.1f} s")
    print("agent      l      t   vbar   vmax   dmin  domin  conv safe")
    for k, a in enumerate(rep.agents):
        print(
            f"{k:5d} {a.l:6.2f} {a.t:6.2f} {a.vbar:6.3f} {a.vmax:6.3f} "
            f"{a.dmin:6.3f} {a.domin:6.2f}  {str(a.sr_conv):>5} {str(a.sr_safe):>4}"
        )
    vb = np.array([a.vbar for a in rep.agents])
    print(f"median vbar {np.nanmedian(vb):.3f} m/s")

    if args.plot:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("matplotlib not installed; skipping plot")
            return
        fig, ax = plt.subplots(figsize=(7, 7))
        for a in rep.agents:
            xy = a.trajectory[:, 1:3]
            ax.plot(xy[:, 0], xy[:, 1], lw=0.8)
            ax.plot(xy[0, 0], xy[0, 1], "ko", ms=3)
            ax.plot(xy[-1, 0], xy[-1, 1], "k^", ms=4)
        ax.set_aspect("equal")
        ax.set_title(f"circle N={args.n} fov={args.fov} seed={args.seed}")
        fig.savefig("circle_paths.png", dpi=150)
        print("wrote circle_paths.png")


if __name__ == "__main__":
    main()
