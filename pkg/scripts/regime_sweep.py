"""Homogeneous Euler on FLRW across the sound-speed regimes.

Fits the tilt rho^{-rs} v1 and the indicator e^{2Ht} rho^{2rs} for each cs2
and prints them against the regime-aware targets, below, at and beyond
radiation.

    python3 scripts/regime_sweep.py [--cs2 0.2 1/3 0.4 0.6 0.8] [--csv out.csv]
"""

import argparse
import csv

from tiltlab.cli import parse_cs2, preset, run_euler, with_overrides
from tiltlab.params import classify_regime


def run(values):
    base = preset("regime-sweep")
    out = []
    for raw in values:
        c = parse_cs2(raw)
        res = run_euler(with_overrides(base, {"cs2": c}))
        rates = {r["variable"]: r for r in res.rates}
        out.append({"cs2": raw, "regime": classify_regime(c).value,
                    "tilt_fit": rates["tilt_homogeneous"]["fitted_exponent"] if "tilt_homogeneous" in rates else "",
                    "tilt_target": rates["tilt_homogeneous"]["target_exponent"] if "tilt_homogeneous" in rates else "",
                    "indicator_fit": rates["tilt_indicator"]["fitted_exponent"],
                    "indicator_target": rates["tilt_indicator"]["target_exponent"],
                    "closed_form_err": res.details["closed_form_max_rel_err"]})
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description="regime sweep of homogeneous tilt rates")
    ap.add_argument("--cs2", nargs="+", default=["0.2", "1/3", "0.4", "0.6", "0.8"])
    ap.add_argument("--csv", default=None)
    args = ap.parse_args(argv)
    rows = run(args.cs2)
    fmt = lambda x: f"{x:+.4f}" if isinstance(x, float) else f"{x:>7s}"
    print(f"{'cs2':>6s} {'regime':26s} {'tilt':>8s} {'target':>8s} {'indic.':>8s} {'target':>8s} {'cf err':>9s}")
    for r in rows:
        print(f"{r['cs2']:>6s} {r['regime']:26s} {fmt(r['tilt_fit']):>8s} {fmt(r['tilt_target']):>8s} "
              f"{fmt(r['indicator_fit']):>8s} {fmt(r['indicator_target']):>8s} {r['closed_form_err']:9.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
