"""Compare the compiled and numpy sparse GEMM backends, then sweep the kept fraction.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--json out.json]
Timings depend on the machine and are never used as test gates.
"""
import argparse
import json

from blockpunch.bench import backend_comparison, kept_fraction_sweep
from blockpunch.runtime.kernels import BACKENDS, DEFAULT_BACKEND


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    print(f"backends: {', '.join(BACKENDS)} (default {DEFAULT_BACKEND})")
    rows = backend_comparison(repeats=args.repeats)
    names = list(BACKENDS) + ["dense_blas"]
    print(f"{'M x C x batch':>18}  " + "  ".join(f"{n + ' ms':>12}" for n in names))
    for row in rows:
        shape = "x".join(map(str, row["shape"]))
        print(f"{shape:>18}  " + "  ".join(f"{row[n] * 1e3:12.3f}" for n in names))

    sweeps = {}
    for name in BACKENDS:
        sweeps[name] = sweep = kept_fraction_sweep(name, repeats=args.repeats)
        print(f"\n{name}: 1024x1024 layer, batch 64")
        for f, t in zip(sweep["fractions"], sweep["seconds"]):
            print(f"  kept {f:4.0%}  {t * 1e3:9.3f} ms")
        print(f"  spearman(step, time) = {sweep['spearman']:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"backends": rows, "sweeps": sweeps}, fh, indent=2, default=list)


if __name__ == "__main__":
    main()
