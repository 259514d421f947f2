"""Command-line entry point.

Every subcommand prints tab-separated ``key:value`` records on stdout and
diagnostics on stderr.  Exit codes: 0 success, 1 usage error, 2 data or
format error.  ``LATEINTERACT_DATA_DIR`` sets the default corpus directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .datagen import CorpusConfig, gen_corpus
from .errors import LateInteractError
from .index import (
    bench_suite,
    build_index,
    flop_count,
    flop_ratio,
    load_items,
    load_shard,
    query_many,
    save_items,
    save_shard,
)
from .interaction import MECHANISMS, WeightHead, default_model, score_batch
from .losses import CDCR_MODES, LossConfig
from .metrics import evaluate
from .numerics import make_rng
from .train import heldout_metrics, train_heads

DATA_ENV = "LATEINTERACT_DATA_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def emit(rec: dict, out=None) -> None:
    out = out or sys.stdout
    out.write("\t".join(f"{k}:{v}" for k, v in rec.items()) + "\n")


def _num(x) -> str:
    return format(float(x), ".10g")


def _data_dir(args) -> Path:
    return Path(args.data or os.environ.get(DATA_ENV, "."))


def _path(args, attr, default_name) -> Path:
    value = getattr(args, attr, None)
    return Path(value) if value else _data_dir(args) / default_name


# ------------------------------------------------------------------ heads IO


def heads_to_json(text: WeightHead, video: WeightHead) -> str:
    doc = {
        side: [{"w": w.tolist(), "b": b.tolist()} for w, b in head.layers]
        for side, head in (("text", text), ("video", video))
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def heads_from_json(path):
    try:
        doc = json.loads(Path(path).read_text())
        return tuple(
            WeightHead([(np.array(l["w"], dtype=np.float64), np.array(l["b"], dtype=np.float64)) for l in doc[side]], side)
            for side in ("text", "video")
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise LateInteractError(f"bad heads file {path}: {exc}") from exc


def _model(args, dim):
    rng = make_rng(args.seed)
    model = default_model(dim, rng, levels=args.s, mlp_depth=args.l, xti_depth=args.xti_layers,
                          xti_heads=args.xti_heads, head_init=args.head_init)
    model.ti_form = args.ti_form
    if getattr(args, "heads", None):
        model.text_head, model.video_head = heads_from_json(args.heads)
    return model


def _truth(path) -> dict:
    truth = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            q, _, d = line.partition("\t")
            truth[int(q)] = int(d)
    return truth


def _corpus_config(args) -> CorpusConfig:
    lo, _, hi = args.scenes.partition("-")
    return CorpusConfig(
        num_docs=args.num_docs,
        scenes_per_doc=(int(lo), int(hi or lo)),
        tokens_per_scene=args.tokens_per_scene,
        text_tokens=args.nt,
        video_tokens=args.nv,
        dim=args.d,
        noise_sigma=args.noise,
        distractor_overlap=args.overlap,
        seed=args.seed,
        filler_fraction=args.filler,
        topic_weight=args.topic_weight,
        num_topics=args.topics,
    )


def _loss_config(args) -> LossConfig:
    return LossConfig(args.logit_scale, args.alpha, args.lam, args.cdcr_mode)


# --------------------------------------------------------------- subcommands


def cmd_gen(args):
    cfg = _corpus_config(args)
    corpus = gen_corpus(cfg)
    out = _data_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"seed": cfg.seed, **{f"config.{k}": v for k, v in cfg.as_record().items()}}
    save_items(corpus.videos, out / "videos.drle", manifest)
    save_items(corpus.queries, out / "queries.drle", manifest)
    (out / "truth.tsv").write_text("".join(f"{q}\t{d}\n" for q, d in sorted(corpus.truth.items())))
    for name in ("videos.drle", "queries.drle", "truth.tsv"):
        emit({"file": name, "bytes": (out / name).stat().st_size})
    emit({"videos": len(corpus.videos), "queries": len(corpus.queries), "dim": cfg.dim, "seed": cfg.seed})


def cmd_index(args):
    videos = load_items(_path(args, "videos", "videos.drle"))
    if not videos:
        raise LateInteractError("no videos to index")
    model = _model(args, videos[0].dim)
    shard = build_index(videos, model.video_head, manifest={"seed": args.seed, "head_init": args.head_init,
                                                             "heads": args.heads or "seeded"})
    out = Path(args.out)
    save_shard(shard, out)
    if args.heads_out:
        Path(args.heads_out).write_text(heads_to_json(model.text_head, model.video_head))
    emit({"shard": out.name, "docs": len(shard), "dim": shard.dim,
          "mechanisms": ",".join(shard.mechanism_support)})


def cmd_query(args):
    shard = load_shard(args.shard)
    queries = load_items(_path(args, "queries", "queries.drle"))
    truth = _truth(args.truth) if args.truth else {}
    model = _model(args, shard.dim)
    results = query_many(queries, shard, args.k, args.mechanism, model, truth, args.threads)
    for r in results:
        for rank, (doc, score) in enumerate(r.ranked, 1):
            emit({"query": r.query_id, "rank": rank, "doc": doc, "score": _num(score)})


def cmd_score(args):
    queries = load_items(_path(args, "queries", "queries.drle"))
    videos = load_items(_path(args, "videos", "videos.drle"))
    if args.limit:
        queries, videos = queries[: args.limit], videos[: args.limit]
    model = _model(args, videos[0].dim)
    s = score_batch(args.mechanism, queries, videos, model)
    for i, q in enumerate(queries):
        for j, v in enumerate(videos):
            emit({"text": q.id, "video": v.id, "score": _num(s.scores[i, j])})


def cmd_eval(args):
    queries = load_items(_path(args, "queries", "queries.drle"))
    truth = _truth(_path(args, "truth", "truth.tsv"))
    if args.shard:
        shard = load_shard(args.shard)
    else:
        videos = load_items(_path(args, "videos", "videos.drle"))
        model = _model(args, videos[0].dim)
        shard = build_index(videos, model.video_head)
    model = _model(args, shard.dim)
    results = query_many(queries, shard, 1, args.mechanism, model, truth, args.threads)
    emit({"mechanism": args.mechanism, **evaluate(results).as_record()})


def cmd_train(args):
    cfg = _corpus_config(args)
    corpus = gen_corpus(cfg)
    report = train_heads(corpus, args.steps, args.step_size, _loss_config(args), args.seed,
                         batch_size=args.batch)
    for rec in report.records():
        emit(rec)
    if args.heads_out:
        Path(args.heads_out).write_text(heads_to_json(report.text_head, report.video_head))


def cmd_bench(args):
    cfg = _corpus_config(args)
    corpus = gen_corpus(cfg)
    model = _model(args, cfg.dim)
    shard = build_index(corpus.videos, model.video_head)
    queries = corpus.queries[: args.queries]
    backends = ["numba", "numpy"] if args.backend == "both" else [args.backend]
    mechanisms = args.mechanisms.split(",")
    for name in mechanisms:
        if name not in MECHANISMS:
            raise UsageError(f"unknown mechanism {name}")
    for be in backends:
        with _kernels.use_backend(be):
            for row in bench_suite(shard, queries, mechanisms, args.repetitions, model):
                mech, rep = row.mechanism, row.flops
                emit({"mechanism": mech, "backend": be, "docs": row.docs, "queries": row.queries,
                      "repetitions": row.repetitions, "model_flops": rep.flops,
                      "model_ratio_to_dp": _num(flop_ratio(mech, "dp", **rep.params)),
                      "median_scan_ms": f"{row.median_scan_ms:.3f}", "docs_per_sec": f"{row.docs_per_sec:.1f}",
                      "p50_ms": f"{row.p50_ms:.3f}", "p95_ms": f"{row.p95_ms:.3f}"})


def cmd_flops(args):
    params = dict(n=args.n, d=args.d, nt=args.nt, nv=args.nv, l=args.l, s=args.s)
    rep = flop_count(args.mechanism, **params)
    rec = {"mechanism": args.mechanism, "flops": rep.flops, "memory_units": rep.memory_units}
    if rep.per_layer_flops is not None:
        rec["per_layer_flops"] = rep.per_layer_flops
    if args.ratio_to:
        r = flop_ratio(args.mechanism, args.ratio_to, per_layer=args.per_layer, **params)
        rec["baseline"] = args.ratio_to
        rec["ratio"] = str(r.numerator) if r.denominator == 1 else f"{float(r):.6f}"
    emit(rec)


# ------------------------------------------------------------------- parsing


def _add_common(p):
    p.add_argument("--data", help=f"corpus directory (default ${DATA_ENV} or .)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)


def _add_model(p):
    p.add_argument("--heads", help="weight heads JSON (default: seeded init)")
    p.add_argument("--head-init", choices=("zero_last", "zero", "uniform"), default="zero_last")
    p.add_argument("--l", type=int, default=4, help="MLP scorer depth")
    p.add_argument("--s", type=int, default=3, help="HI levels")
    p.add_argument("--xti-layers", type=int, default=1)
    p.add_argument("--xti-heads", type=int, default=1)
    p.add_argument("--ti-form", choices=("mean", "sum"), default="mean")


def _add_corpus(p, num_docs=1000, dim=512):
    p.add_argument("--num-docs", type=int, default=num_docs)
    p.add_argument("--scenes", default="1-3", help="scenes per video, 'lo-hi'")
    p.add_argument("--tokens-per-scene", type=int, default=4)
    p.add_argument("--nt", type=int, default=32)
    p.add_argument("--nv", type=int, default=12)
    p.add_argument("--d", type=int, default=dim)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--filler", type=float, default=0.0)
    p.add_argument("--topic-weight", type=float, default=0.8)
    p.add_argument("--topics", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lateinteract", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="write a synthetic corpus (videos.drle, queries.drle, truth.tsv)")
    _add_common(p)
    _add_corpus(p)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("index", help="build a shard with precomputed video weights")
    _add_common(p)
    _add_model(p)
    p.add_argument("--videos")
    p.add_argument("--out", required=True)
    p.add_argument("--heads-out")
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("query", help="top-k exact scan over a shard; one record per (query, rank)")
    _add_common(p)
    _add_model(p)
    p.add_argument("--shard", required=True)
    p.add_argument("--queries")
    p.add_argument("--truth")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--mechanism", choices=MECHANISMS, default="wti")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("score", help="pairwise score matrix; fields text, video, score")
    _add_common(p)
    _add_model(p)
    p.add_argument("--queries")
    p.add_argument("--videos")
    p.add_argument("--limit", type=int, default=0, help="only the first N queries and videos")
    p.add_argument("--mechanism", choices=MECHANISMS, default="wti")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="R@1/5/10, MdR, MnR of a mechanism")
    _add_common(p)
    _add_model(p)
    p.add_argument("--shard")
    p.add_argument("--queries")
    p.add_argument("--videos")
    p.add_argument("--truth")
    p.add_argument("--mechanism", choices=MECHANISMS, default="wti")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("train", help="gradient descent on the WTI weight heads over a generated corpus")
    _add_common(p)
    _add_corpus(p, dim=64)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--step-size", type=float, default=2.0)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--logit-scale", type=float, default=100.0)
    p.add_argument("--alpha", type=float, default=0.06)
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--cdcr-mode", choices=CDCR_MODES, default="sequential")
    p.add_argument("--heads-out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="scan timing per mechanism and backend, with modeled FLOPs")
    _add_common(p)
    _add_model(p)
    _add_corpus(p, num_docs=10000, dim=64)
    p.add_argument("--queries", type=int, default=4)
    p.add_argument("--mechanisms", default="dp,ti,wti,xti")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--backend", choices=("numba", "numpy", "both"), default=_kernels.backend())
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("flops", help="closed-form cost model; --ratio-to gives an exact ratio")
    p.add_argument("--mechanism", choices=MECHANISMS, required=True)
    p.add_argument("--ratio-to", choices=MECHANISMS)
    p.add_argument("--per-layer", action="store_true", help="use one XTI block in ratios")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--nt", type=int, default=32)
    p.add_argument("--nv", type=int, default=12)
    p.add_argument("--l", type=int, default=4)
    p.add_argument("--s", type=int, default=3)
    p.set_defaults(fn=cmd_flops)
    return ap


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (LateInteractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
