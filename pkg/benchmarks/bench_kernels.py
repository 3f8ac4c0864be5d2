"""Compare the compiled and numpy MaxSim kernels.

    python benchmarks/bench_kernels.py --pages 200 --doc-tokens 256 --dim 128

Prints one row per backend and workload with the best-of-N wall time.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from lateqa.retrieval.kernels import available_backends


def workloads(rng, args):
    q = rng.normal(size=(args.query_tokens, args.dim))
    d = rng.normal(size=(args.doc_tokens, args.dim))
    lengths = rng.integers(args.doc_tokens // 2, args.doc_tokens + 1, size=args.pages)
    flat = rng.normal(size=(int(lengths.sum()), args.dim))
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return {
        "maxsim (one page)": lambda m: m.maxsim(q, d),
        "maxsim_argmax (one page)": lambda m: m.maxsim_argmax(q, d),
        f"score_pages ({args.pages} pages)": lambda m: m.score_pages(q, flat, offsets),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--query-tokens", type=int, default=24)
    ap.add_argument("--doc-tokens", type=int, default=256)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--pages", type=int, default=100)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'workload':<28} {'backend':<8} {'best ms':>10} {'speedup':>8}")
    for name, fn in workloads(rng, args).items():
        base = None
        for backend in ("numpy", "cython"):
            if backend not in backends:
                continue
            mod = backends[backend]
            number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(mod), number=1), 1e-6)))
            best = min(timeit.repeat(lambda: fn(mod), number=number, repeat=args.repeat)) / number
            base = base or best
            print(f"{name:<28} {backend:<8} {best * 1e3:>10.3f} {base / best:>7.1f}x")


if __name__ == "__main__":
    main()
