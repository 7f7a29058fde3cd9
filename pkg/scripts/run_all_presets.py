"""Run every CLI preset into one output tree and print a status table.

    python3 scripts/run_all_presets.py --out runs/presets [--only vacuum rates]
"""

import argparse
import json
import time
from pathlib import Path

from tiltlab.cli import PRESETS, SUBCOMMANDS, main

COMMAND = {scen: cmd for cmd, scen in SUBCOMMANDS.items()}


def main_(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/presets")
    ap.add_argument("--only", nargs="*", default=None, help="subset of preset names")
    ap.add_argument("--sweeps", action="store_true", help="also run the cs2 grid of presets that have one")
    args = ap.parse_args(argv)
    names = args.only or list(PRESETS)
    root = Path(args.out)
    rows = []
    for name in names:
        raw = PRESETS[name]
        cmd = COMMAND[raw["scenario"]]
        t0 = time.perf_counter()
        code = main([cmd, "--preset", name, "--out", str(root / name)])
        rows.append((name, cmd, code, time.perf_counter() - t0))
        if args.sweeps and raw.get("grid"):
            t0 = time.perf_counter()
            code = main(["sweep", "--preset", name, "--out", str(root / f"{name}-sweep"), "--threads", "4"])
            rows.append((f"{name} (sweep)", "sweep", code, time.perf_counter() - t0))
    print(f"\n{'preset':28s} {'command':12s} {'exit':>4s} {'seconds':>8s}")
    for name, cmd, code, dt in rows:
        print(f"{name:28s} {cmd:12s} {code:4d} {dt:8.1f}")
    (root / "summary.json").write_text(json.dumps(
        [{"preset": n, "command": c, "exit": e, "seconds": s} for n, c, e, s in rows], indent=2) + "\n")
    return max((code for _, _, code, _ in rows), default=0)


if __name__ == "__main__":
    raise SystemExit(main_())
