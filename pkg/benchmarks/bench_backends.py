"""Compare the numba kernels with the pure-numpy fallback.

Times two things per backend: full shard scans through ``bench_suite``
and the batch ``maxsim`` reduction used by the training-side scorers.
Scores are checked for agreement before any timing is reported.

    python benchmarks/bench_backends.py --num-docs 10000 --d 64
"""

import argparse
import time

import numpy as np

from lateinteract import _kernels
from lateinteract.datagen import CorpusConfig, gen_corpus
from lateinteract.index import bench_suite, build_index, shard_scores
from lateinteract.interaction import default_model
from lateinteract.numerics import make_rng


def _median_ms(fn, repetitions):
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--num-docs", type=int, default=10_000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--queries", type=int, default=4)
    ap.add_argument("--repetitions", type=int, default=7)
    ap.add_argument("--mechanisms", default="ti,wti")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    corpus = gen_corpus(CorpusConfig(num_docs=args.num_docs, dim=args.d, seed=args.seed))
    model = default_model(args.d, make_rng(args.seed), head_init="uniform")
    shard = build_index(corpus.videos, model.video_head)
    queries = corpus.queries[: args.queries]
    mechanisms = args.mechanisms.split(",")

    # correctness first: both backends must produce the same scores
    for mech in mechanisms:
        with _kernels.use_backend("numpy"):
            ref = shard_scores(queries[0], shard, mech, model)
        with _kernels.use_backend("numba"):
            got = shard_scores(queries[0], shard, mech, model)
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)

    print(f"shard scan: {args.num_docs} docs, D={args.d}, {args.queries} queries, median of {args.repetitions}")
    print(f"{'mechanism':<10}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    rows = {}
    for be in ("numpy", "numba"):
        with _kernels.use_backend(be):
            for r in bench_suite(shard, queries, mechanisms, args.repetitions, model):
                rows[be, r.mechanism] = r.median_scan_ms
    for mech in mechanisms:
        a, b = rows["numpy", mech], rows["numba", mech]
        print(f"{mech:<10}{a:>12.2f}{b:>12.2f}{a / b:>9.2f}x")

    rng = make_rng(args.seed)
    sims = rng.standard_normal((32, 32, 32, 12))
    tmask = rng.random((32, 32)) < 0.7
    vmask = rng.random((32, 12)) < 0.8
    print("\nbatch maxsim (32 x 32 pairs, 32 x 12 tokens)")
    out = {}
    for be in ("numpy", "numba"):
        with _kernels.use_backend(be):
            _kernels.maxsim(sims, tmask, vmask)
            out[be] = _median_ms(lambda: _kernels.maxsim(sims, tmask, vmask), args.repetitions)
    print(f"numpy {out['numpy']:.2f} ms, numba {out['numba']:.2f} ms, speedup {out['numpy'] / out['numba']:.2f}x")


if __name__ == "__main__":
    main()
