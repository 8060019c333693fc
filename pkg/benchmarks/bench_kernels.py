"""Compare the compiled and pure-Python kernel backends.

Usage: ``python benchmarks/bench_kernels.py [--repeat N]``
"""

from __future__ import annotations

import argparse
import random
import timeit

from bc2chat import kernels


def workloads(seed: int = 0):
    rng = random.Random(seed)
    rects, colors = [], []
    for _ in range(5):
        x, y = rng.uniform(0, 0.8), rng.uniform(0, 0.7)
        rects.append((x, y, x + rng.uniform(0.05, 0.2), y + rng.uniform(0.1, 0.3)))
        colors.append(tuple(rng.randrange(256) for _ in range(3)))
    probes = [(x, y, x + 0.1, y + 0.15) for x, y in ((rng.random(), rng.random()) for _ in range(200))]
    values = [rng.random() for _ in range(5000)]
    return {
        "raster 256x128, 5 rects": lambda k: k.raster_rects(256, 128, (96, 76, 58), rects, colors),
        "first_overlap x200": lambda k: [k.first_overlap(rects, p) for p in probes],
        "intersection_area x200": lambda k: [k.intersection_area(rects[0], p) for p in probes],
        "quantize_bins 5000": lambda k: k.quantize_bins(values, 256),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    backends = {"python": kernels.python_backend}
    if kernels.compiled_backend is not None:
        backends["compiled"] = kernels.compiled_backend
    else:
        print("compiled backend not built; showing the Python backend only")
    print(f"{'workload':28} " + " ".join(f"{n:>12}" for n in backends) + "     speedup")
    for name, fn in workloads().items():
        outs = {n: fn(k) for n, k in backends.items()}
        assert len({repr(o) for o in outs.values()}) == 1, f"backends disagree on {name}"
        times = {n: min(timeit.repeat(lambda k=k: fn(k), number=1, repeat=args.repeat)) for n, k in backends.items()}
        speed = f"{times['python'] / times['compiled']:10.1f}x" if "compiled" in times else ""
        print(f"{name:28} " + " ".join(f"{t * 1e6:10.1f}us" for t in times.values()) + speed)


if __name__ == "__main__":
    main()
