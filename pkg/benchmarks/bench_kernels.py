"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case is timed on both backends (best of ``--repeat``), and the outputs
are checked to be identical.
"""

import argparse
import json
import time

import numpy as np

from mrag import kernels


def best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def cases(rng):
    for n, d in ((10_000, 64), (100_000, 32)):
        mat = rng.standard_normal((n, d)).astype(np.float32)
        norms = kernels.pure.row_norms(mat)
        q = rng.standard_normal(d)
        qn = float(np.sqrt(q @ q))
        yield f"row_norms n={n} d={d}", lambda be, m=mat: be.row_norms(m)
        yield f"top_k n={n} d={d} k=10", \
            lambda be, m=mat, nr=norms, q=q, qn=qn: be.cosine_topk(m, nr, q, qn, 10)
    mat = rng.standard_normal((2000, 32)).astype(np.float32)
    norms = kernels.pure.row_norms(mat)
    qs = rng.standard_normal((2000, 32))
    qns = np.sqrt(np.einsum("ij,ij->i", qs, qs))
    yield "top_k batch n=2000 q=2000 d=32 k=1", \
        lambda be: be.cosine_topk_batch(mat, norms, qs, qns, 1)
    a = rng.integers(0, 50, 300).astype(np.int64)
    b = rng.integers(0, 50, 300).astype(np.int64)
    yield "lcs 300x300", lambda be: be.lcs_length(a, b)
    short = [rng.integers(0, 12, 12).astype(np.int64) for _ in range(2000)]
    yield "lcs 2000 pairs of 12 tokens", \
        lambda be: np.array([be.lcs_length(x, y) for x, y in zip(short, short[1:])])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")

    rows = []
    print(f"{'case':40s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s}  equal")
    for name, fn in cases(np.random.default_rng(args.seed)):
        tc, oc = best_of(lambda: fn(kernels.compiled), args.repeat)
        tp, op = best_of(lambda: fn(kernels.pure), args.repeat)
        eq = same(oc, op)
        rows.append({"case": name, "cython": tc, "python": tp, "speedup": tp / tc, "equal": eq})
        print(f"{name:40s} {tc:10.5f} {tp:10.5f} {tp / tc:7.1f}x  {eq}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["equal"] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
