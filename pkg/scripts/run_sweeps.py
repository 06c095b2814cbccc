"""Run builtin figure sweeps into results/<name>.csv (one flushed row per cell).

    python scripts/run_sweeps.py coverage bandwidth --workers 4
    python scripts/run_sweeps.py --all --reps 3
"""

import argparse
import dataclasses
from pathlib import Path

from dhvo.harness import builtin_sweeps, run_sweep


def main():
    specs = builtin_sweeps()
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help=", ".join(specs))
    ap.add_argument("--all", action="store_true")
    ap.add_argument("--reps", type=int, default=1)
    ap.add_argument("--episodes", type=int, default=40)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out-dir", default="results")
    a = ap.parse_args()
    names = list(specs) if a.all else a.names
    if not names:
        ap.error("name at least one sweep or pass --all")
    out = Path(a.out_dir)
    for name in names:
        spec = dataclasses.replace(specs[name], repetitions=a.reps, episodes=a.episodes)
        print(f"== {name}: {spec.param} {list(spec.values)}", flush=True)
        run_sweep(spec, out / f"{name}.csv", a.workers, log_dir=out / "logs",
                  echo=lambda r: print(f"  {r.policy:9s} {r.value} rep {r.rep} "
                                       f"tesc {r.mean_tesc:.3f}", flush=True))


if __name__ == "__main__":
    main()
