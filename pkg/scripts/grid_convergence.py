"""Grid-refinement study: rerun a scenario at several resolutions and tabulate
(mu, omega) per branch, plus the drift between the two finest grids."""

import argparse
import json
from pathlib import Path

from eigenbranch.cli import sweep
from eigenbranch.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="doublewell")
    ap.add_argument("--n", default="128,256,512", help="comma separated grid sizes")
    ap.add_argument("--out", default="runs/grid_convergence")
    args = ap.parse_args()

    sizes = [int(v) for v in args.n.split(",")]
    out = Path(args.out)
    rows = sweep(load_scenario(args.scenario), "n_points", sizes, out)

    print(f"{'n':>6} {'status':>9} {'branch':>6} {'mu':>12} {'omega':>10} {'fit_res':>9}")
    table = {}
    for n, row in zip(sizes, rows):
        path = out / f"n_points-{n}" / "report.json"
        if not path.exists() or row["status"] != "complete":
            print(f"{n:>6} {row['status']:>9}")
            continue
        rep = json.loads(path.read_text())
        table[n] = rep["branches"]
        for b in rep["branches"]:
            print(f"{n:>6} {row['status']:>9} {b['branch']:>6} {b['mu']:>12.4e} "
                  f"{b['omega']:>10.5f} {b['fit_residual']:>9.1e}")

    done = [n for n in sizes if n in table]
    if len(done) >= 2:
        a, b = table[done[-2]], table[done[-1]]
        print(f"\ndrift between n={done[-2]} and n={done[-1]}:")
        for x, y in zip(a, b):
            rel = abs(x["omega"] - y["omega"]) / max(abs(y["omega"]), 1e-12)
            growth = abs(x["growth_bound"] - y["growth_bound"]) / max(abs(y["growth_bound"]), 1e-12)
            print(f"  branch {y['branch']}: |dmu|={abs(x['mu'] - y['mu']):.1e}  "
                  f"|domega|/omega={rel:.1e}  growth-bound change={growth:.1e}")


if __name__ == "__main__":
    main()
