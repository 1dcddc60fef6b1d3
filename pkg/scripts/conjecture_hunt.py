"""Look for branches whose scaled energy does not settle at min V.

Scans two-well potentials  V = sin^2 x + d (1 - cos x)/2  whose wells at 0 and
pi differ in depth by d, and lists every branch with its (mu, omega) and the
gap mu - min V.  A branch living in the shallow well shows gap ~ d at finite t;
whether it stays there as t grows is exactly the open question, so nothing
here is pass/fail.
"""

import argparse
import json

from eigenbranch.cli import run
from eigenbranch.scenario import parse_scenario


def scenario(depth: float, n: int, t_max: float, k: int):
    # sin^2 x + d (1 - cos x)/2 = (1 + d)/2 - (d/2) cos x - cos(2x)/2
    v = f"poly_trig:{(1 + depth) / 2!r},{-depth / 2!r},0,-0.5"
    return parse_scenario(json.dumps({
        "name": f"wells-{depth:g}",
        "geometry": {"n_points": n},
        "builtin": {"v": v},
        "tgrid": {"t_min": 0, "t_max": t_max, "base_steps": int(2 * t_max)},
        "track": {"k": k},
    }))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--depths", default="0,0.01,0.04,0.1,0.3")
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--t-max", type=float, default=24.0)
    ap.add_argument("--k", type=int, default=4)
    args = ap.parse_args()

    print(f"{'depth':>6} {'branch':>6} {'mu':>11} {'omega':>9} {'mu - min V':>11}  note")
    for depth in (float(d) for d in args.depths.split(",")):
        rep = run(scenario(depth, args.n, args.t_max, args.k)).report
        if not rep["complete"]:
            print(f"{depth:>6g}  aborted: {rep['error']}")
            continue
        for b in rep["branches"]:
            note = "shallow well" if depth > 0 and abs(b["conjecture_gap"] - depth) < 0.1 * depth else ""
            print(f"{depth:>6g} {b['branch']:>6} {b['mu']:>11.3e} {b['omega']:>9.4f} "
                  f"{b['conjecture_gap']:>11.3e}  {note}")


if __name__ == "__main__":
    main()
