"""Exploratory probe of the top-order velocity norm in coupled runs.

For each cs2 runs the coupled system at every band limit in --L and fits
e^{Ht} |v^|_{dot H^N}. Prints the per-L exponents and the verdict. Report
only: nothing here is a pass/fail gate.

    python3 scripts/top_order_probe.py [--cs2 0.5 0.6] [--L 3 4] [--span 5] [--output-every 0.1]
"""

import argparse
import json

from tiltlab.cli import parse_cs2, preset, run_coupled, with_overrides


def main(argv=None):
    ap = argparse.ArgumentParser(description="top-order norm probe")
    ap.add_argument("--cs2", nargs="+", default=["0.5", "0.6"])
    ap.add_argument("--L", nargs="+", type=int, default=[3, 4])
    ap.add_argument("--span", type=float, default=5.0, help="run length in units of 1/H")
    ap.add_argument("--output-every", type=float, default=0.1, help="sampling interval of the fitted series")
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    base = preset("top-order-probe")
    reports = []
    for raw in args.cs2:
        cfg = with_overrides(base, {"cs2": parse_cs2(raw), "L": max(args.L), "top_order_L": args.L,
                                    "t_end": base.T + args.span, "integrator.output_every": args.output_every})
        details = run_coupled(cfg).details
        if "top_order_probe" not in details:
            print(f"cs2={raw}: no verdict ({details['top_order_probe_error']})")
            continue
        probe = details["top_order_probe"]
        reports.append(probe)
        ex = "  ".join(f"L={L}: {x:+.4f}" for L, x in sorted(probe["exponents"].items()))
        pex = "  ".join(f"L={L}: {x:+.4f}" for L, x in sorted(probe["proven_exponents"].items()))
        print(f"cs2={raw}: {probe['verdict']}")
        print(f"  e^(Ht) weight          {ex}")
        print(f"  e^((1-2As)Ht) weight   {pex}")
        print(f"  spread across L        {probe['L_spread']:.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(reports, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
