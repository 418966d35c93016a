"""Command-line entry points.

Every subcommand reads one JSON pipeline config (all fields optional) plus
flags, and writes headered JSONL keyed by (config hash, seed) so pure
stages are byte-for-byte reproducible. Exit codes: 0 success, 1 domain
error, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .backends import HttpChatBackend, MockChatBackend, ResponseCache
from .config import (
    DatasetRecord,
    PipelineConfig,
    check_unique_ids,
    load_config,
)
from .errors import ConfigError, DomainError, FrameSelectError
from .evalharness import (
    MockLabelScorer,
    ParametricDownstream,
    RandomScorer,
    SelectorScorer,
    SignalCatalog,
    SyntheticTask,
    constant_scorer,
    evaluate_policy,
    gen_tasks,
    gen_timeline_tasks,
    oracle_scorer,
    sweep_pool_size,
)
from .frames import VideoMeta, plan_uniform
from .pseudolabel import (
    TemporalLabel,
    caption_frames,
    make_label_record,
    spatial_score_video,
    temporal_rank,
)
from .selection import ImportanceVector, nms_greedy, topk, uniform_k
from .selector import init_lora, init_params
from .store import (
    label_record_from_dict,
    label_record_to_dict,
    load_checkpoint,
    read_feature_fixture,
    read_jsonl,
    save_checkpoint,
    selection_record,
    write_feature_fixture,
    write_jsonl,
)
from .tokenizer import PAD_ID, tokenize
from .training import Trainer, TrainConfig, make_batches


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="frameselect", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command")

    def add(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="pipeline config JSON")
        return p

    p = add("plan", "uniformly sample candidate frame indices")
    p.add_argument("--video-id", required=True)
    p.add_argument("--total-frames", type=int, required=True)
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--out", required=True)

    p = add("gen-synthetic", "generate a planted-key synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--key-count", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--signal-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None, help="defaults to config seed")
    p.add_argument("--emit-features", default=None, help="also write a feature fixture")

    p = add("caption", "caption every candidate frame")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = add("label-spatial", "per-frame usefulness scores from the backend")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = add("label-temporal", "joint caption ranking from the backend")
    p.add_argument("--dataset", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--want", type=int, default=None, help="defaults to config labeler.want")

    p = add("fuse", "fuse spatial and temporal labels into training targets")
    p.add_argument("--spatial", required=True)
    p.add_argument("--temporal", required=True)
    p.add_argument("--out", required=True)

    p = add("train", "train the selector (stage 1 or 2)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--init", default=None, help="stage-1 checkpoint to continue from")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--peak-lr", type=float, default=None)

    p = add("select", "pick k frames from importance scores")
    p.add_argument("--scores", default=None, help="JSONL with per-pair score vectors")
    p.add_argument("--checkpoint", default=None, help="score with a trained selector")
    p.add_argument("--dataset", default=None, help="needed with --checkpoint")
    p.add_argument("--policy", default=None, choices=("nms-greedy", "topk", "uniform"))
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("eval", "hit rate / recall of a scorer+policy over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scorer", required=True,
                   choices=("oracle", "random", "constant", "selector", "fused-mock"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--policy", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--a-hit", type=float, default=None, help="enable the downstream accuracy model")
    p.add_argument("--a-miss", type=float, default=None)
    p.add_argument("--out", required=True)

    p = add("sweep", "hit rate vs candidate pool size over a shared timeline")
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--pool-sizes", default="16,32,128")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--timeline-frames", type=int, default=1024)
    p.add_argument("--segment-width", type=int, default=48)
    p.add_argument("--scorer", default="oracle", choices=("oracle", "selector"))
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("report", "summarize loss/eval JSONL files")
    p.add_argument("--losses", default=None)
    p.add_argument("--eval", dest="eval_files", action="append", default=[])
    p.add_argument("--plot", default=None, help="write a PNG of the eval reports")

    return parser


# -------------------------- shared helpers --------------------------


def _build_backend(cfg: PipelineConfig):
    b = cfg.backend
    if b.kind == "mock-deterministic":
        catalog = SignalCatalog.default(cfg.selector.d_v, b.catalog_seed)
        return MockChatBackend(
            seed=b.seed,
            catalog=catalog.pairs(),
            noncompliant_fraction=b.noncompliant_fraction,
        )
    api_key = os.environ.get(b.api_key_env) if b.api_key_env else None
    return HttpChatBackend(
        endpoint=b.endpoint, model=b.model, timeout=b.timeout_s,
        max_retries=b.max_retries, api_key=api_key,
    )


def _cache(cfg: PipelineConfig) -> ResponseCache | None:
    return ResponseCache(cfg.paths.cache) if cfg.paths.cache else None


def _catalog(cfg: PipelineConfig) -> SignalCatalog:
    return SignalCatalog.default(cfg.selector.d_v, cfg.backend.catalog_seed)


def _load_dataset(path: str) -> list[DatasetRecord]:
    _, rows = read_jsonl(path, kind="dataset")
    records = [DatasetRecord.from_record(r) for r in rows]
    check_unique_ids(records, path)
    return records


def _synthetic_task(record: DatasetRecord, catalog: SignalCatalog) -> SyntheticTask:
    src = record.frame_source
    if src["kind"] == "synthetic":
        # Tasks are seeded per index, so generating a prefix and indexing
        # into it reproduces the record's task exactly.
        return gen_tasks(
            count=1 + int(src["index"]), n=record.n,
            key_count=int(src["key_count"]), noise=float(src["noise"]),
            seed=int(src["seed"]), catalog=catalog,
            g=int(src["g"]), d_v=int(src["d_v"]),
            signal_scale=float(src["signal_scale"]),
        )[int(src["index"])]
    fixture = read_feature_fixture(src["path"])
    frame_ids = sorted(idx for vid, idx in fixture if vid == record.video_id)
    if len(frame_ids) != record.n:
        raise DomainError(
            f"{record.video_id}: fixture holds {len(frame_ids)} frames, dataset says {record.n}"
        )
    grids = np.stack([fixture[(record.video_id, i)].grid for i in frame_ids])
    return SyntheticTask(
        task_id=record.video_id, n=record.n, question=record.question,
        cue="", key_set=frozenset(), noise=0.0, grids=grids,
    )


# Regenerating the whole prefix for one record would be quadratic; cache by
# generator signature.
_GEN_CACHE: dict[tuple, list[SyntheticTask]] = {}


def _synthetic_tasks_bulk(records: list[DatasetRecord], catalog: SignalCatalog) -> list[SyntheticTask]:
    out: list[SyntheticTask] = []
    for record in records:
        src = record.frame_source
        if src["kind"] != "synthetic":
            out.append(_synthetic_task(record, catalog))
            continue
        sig = (
            int(src["seed"]), record.n, int(src["key_count"]), float(src["noise"]),
            float(src["signal_scale"]), int(src["g"]), int(src["d_v"]), int(src["total"]),
        )
        if sig not in _GEN_CACHE:
            _GEN_CACHE[sig] = gen_tasks(
                count=sig[7], n=record.n, key_count=sig[2], noise=sig[3],
                seed=sig[0], catalog=catalog, g=sig[5], d_v=sig[6], signal_scale=sig[4],
            )
        out.append(_GEN_CACHE[sig][int(src["index"])])
    return out


# -------------------------- subcommands --------------------------


def _cmd_plan(args, cfg: PipelineConfig) -> int:
    meta = VideoMeta(video_id=args.video_id, total_frames=args.total_frames, fps=args.fps)
    plan = plan_uniform(meta, args.n)
    write_jsonl(
        args.out,
        [{
            "video_id": meta.video_id, "total_frames": meta.total_frames,
            "fps": meta.fps, "n": plan.n, "indices": list(plan.indices),
        }],
        kind="frame-plan", config_hash=cfg.hash, seed=cfg.seed,
    )
    return 0


def _cmd_gen_synthetic(args, cfg: PipelineConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    catalog = _catalog(cfg)
    tasks = gen_tasks(
        count=args.count, n=args.n, key_count=args.key_count, noise=args.noise,
        seed=seed, catalog=catalog, g=int(np.sqrt(cfg.selector.m)),
        d_v=cfg.selector.d_v, signal_scale=args.signal_scale,
    )
    records = []
    for t, task in enumerate(tasks):
        records.append(
            DatasetRecord(
                video_id=task.task_id,
                question_id=f"q-{t:05d}",
                question=task.question,
                n=task.n,
                frame_source={
                    "kind": "synthetic", "seed": seed, "index": t, "total": args.count,
                    "key_count": args.key_count, "noise": args.noise,
                    "signal_scale": args.signal_scale,
                    "g": int(np.sqrt(cfg.selector.m)), "d_v": cfg.selector.d_v,
                    "cue": task.cue, "key_set": sorted(task.key_set),
                },
            ).to_record()
        )
    write_jsonl(args.out, records, kind="dataset", config_hash=cfg.hash, seed=seed)
    if args.emit_features:
        entries = []
        for task in tasks:
            for frame in task.frames():
                entries.append((task.task_id, frame))
        write_feature_fixture(args.emit_features, entries)
    return 0


def _cmd_caption(args, cfg: PipelineConfig) -> int:
    records = _load_dataset(args.dataset)
    catalog = _catalog(cfg)
    backend = _build_backend(cfg)
    cache = _cache(cfg)
    rows = []
    for record, task in zip(records, _synthetic_tasks_bulk(records, catalog)):
        captions = caption_frames(
            backend, task.frames(), video_id=record.video_id, cache=cache,
            prompt=cfg.labeler.caption_prompt, max_in_flight=cfg.parallelism,
        )
        rows.append({
            "video_id": record.video_id, "question_id": record.question_id,
            "captions": captions,
        })
    write_jsonl(args.out, rows, kind="captions", config_hash=cfg.hash, seed=cfg.seed)
    return 0


def _cmd_label_spatial(args, cfg: PipelineConfig) -> int:
    records = _load_dataset(args.dataset)
    catalog = _catalog(cfg)
    backend = _build_backend(cfg)
    cache = _cache(cfg)
    rows = []
    for record, task in zip(records, _synthetic_tasks_bulk(records, catalog)):
        raw = spatial_score_video(
            backend, task.frames(), record.question, video_id=record.video_id,
            cache=cache, max_in_flight=cfg.parallelism,
        )
        rows.append({
            "video_id": record.video_id, "question_id": record.question_id,
            "scores": [r.score for r in raw],
            "fallbacks": sum(r.fallback_used for r in raw),
        })
    write_jsonl(args.out, rows, kind="spatial-labels", config_hash=cfg.hash, seed=cfg.seed)
    return 0


def _cmd_label_temporal(args, cfg: PipelineConfig) -> int:
    records = _load_dataset(args.dataset)
    _, caption_rows = read_jsonl(args.captions, kind="captions")
    captions = {(r["video_id"], r["question_id"]): r["captions"] for r in caption_rows}
    backend = _build_backend(cfg)
    cache = _cache(cfg)
    want = cfg.labeler.want if args.want is None else args.want
    rows = []
    for record in records:
        key = (record.video_id, record.question_id)
        if key not in captions:
            raise DomainError(f"no captions for {key}")
        label = temporal_rank(
            backend, captions[key], record.question, want=want,
            video_id=record.video_id, cache=cache,
        )
        rows.append({
            "video_id": record.video_id, "question_id": record.question_id,
            "n": record.n, "helpful": sorted(label.helpful), "parse_ok": label.parse_ok,
        })
    write_jsonl(args.out, rows, kind="temporal-labels", config_hash=cfg.hash, seed=cfg.seed)
    return 0


def _cmd_fuse(args, cfg: PipelineConfig) -> int:
    _, spatial_rows = read_jsonl(args.spatial, kind="spatial-labels")
    _, temporal_rows = read_jsonl(args.temporal, kind="temporal-labels")
    temporal = {(r["video_id"], r["question_id"]): r for r in temporal_rows}
    rows = []
    for srow in spatial_rows:
        key = (srow["video_id"], srow["question_id"])
        if key not in temporal:
            raise DomainError(f"no temporal labels for {key}")
        trow = temporal[key]
        label = TemporalLabel(helpful=tuple(trow["helpful"]), parse_ok=trow["parse_ok"])
        record = make_label_record(srow["video_id"], srow["question_id"], srow["scores"], label)
        rows.append(label_record_to_dict(record))
    write_jsonl(args.out, rows, kind="pseudo-labels", config_hash=cfg.hash, seed=cfg.seed)
    return 0


def _question_ids_matrix(records, vocab, l_max) -> np.ndarray:
    ids = [tokenize(r.question, vocab, l_max) for r in records]
    width = max(len(i) for i in ids)
    return np.array([list(i) + [PAD_ID] * (width - len(i)) for i in ids], dtype=np.int64)


def _cmd_train(args, cfg: PipelineConfig) -> int:
    records = _load_dataset(args.dataset)
    _, label_rows = read_jsonl(args.labels, kind="pseudo-labels")
    labels = {(r["video_id"], r["question_id"]): label_record_from_dict(r) for r in label_rows}
    catalog = _catalog(cfg)
    tasks = _synthetic_tasks_bulk(records, catalog)

    n = records[0].n
    if any(r.n != n for r in records):
        raise DomainError("training requires a uniform candidate count n")
    vis = np.stack([t.grids.reshape(n, cfg.selector.m, cfg.selector.d_v) for t in tasks])
    qids = _question_ids_matrix(records, cfg.selector.vocab, cfg.selector.l_max)
    targets = np.stack([
        np.asarray(labels[(r.video_id, r.question_id)].fused) for r in records
    ])

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = {
        k: v for k, v in (
            ("epochs", args.epochs), ("batch_size", args.batch_size),
            ("peak_lr", args.peak_lr),
        ) if v is not None
    }

    if args.stage == 1:
        tc = TrainConfig(stage=1, schedule="constant-after-warmup",
                         seed=cfg.seed, **{"epochs": 2, **overrides})
        params = init_params(cfg.selector, seed=cfg.seed)
        responses = []
        for record in records:
            cue = record.frame_source.get("cue", "")
            text = record.answer or (catalog.response_for(cue) if cue else record.question)
            responses.append(tokenize(text, cfg.selector.vocab, cfg.selector.r_max))
        width = max(len(rr) for rr in responses)
        resp = np.array([list(rr) + [PAD_ID] * (width - len(rr)) for rr in responses], dtype=np.int64)
        score_batches = make_batches(vis, qids, targets, None, tc.batch_size)
        instr_batches = make_batches(vis, qids, None, resp, tc.batch_size)
        trainer = Trainer(params, cfg.selector, tc)
        reports = trainer.run_stage1(instr_batches, score_batches)
        save_checkpoint(out_dir / "stage1.ckpt", params, cfg.selector, cfg.seed)
        write_jsonl(out_dir / "losses_stage1.jsonl", (r.to_record() for r in reports),
                    kind="loss-reports", config_hash=cfg.hash, seed=cfg.seed)
    else:
        init_path = Path(args.init) if args.init else out_dir / "stage1.ckpt"
        if not init_path.exists():
            raise ConfigError(
                f"stage 2 needs a stage-1 checkpoint; {init_path} does not exist"
            )
        params, sel_cfg, _, _ = load_checkpoint(init_path)
        tc = TrainConfig(stage=2, schedule="cosine", seed=cfg.seed,
                         **{"epochs": 5, **overrides})
        adapters = init_lora(sel_cfg, rank=tc.lora_rank, alpha=tc.lora_alpha, seed=cfg.seed)
        score_batches = make_batches(vis, qids, targets, None, tc.batch_size)
        trainer = Trainer(params, sel_cfg, tc, adapters=adapters)
        reports = trainer.run_stage2(score_batches)
        save_checkpoint(out_dir / "stage2.ckpt", params, sel_cfg, cfg.seed, adapters=adapters)
        write_jsonl(out_dir / "losses_stage2.jsonl", (r.to_record() for r in reports),
                    kind="loss-reports", config_hash=cfg.hash, seed=cfg.seed)
    return 0


def _cmd_select(args, cfg: PipelineConfig) -> int:
    policy = args.policy or cfg.selection.policy
    k = args.k or cfg.selection.k
    rows = []
    if args.scores:
        _, score_rows = read_jsonl(args.scores)
        for row in score_rows:
            vec = row.get("scores", row.get("fused"))
            if vec is None:
                raise DomainError(f"no scores in row for {row.get('video_id')}")
            iv = ImportanceVector(scores=tuple(float(x) for x in vec), provenance="fused")
            result = _select(iv, policy, k)
            rows.append(selection_record(row["video_id"], row["question_id"], result))
    elif args.checkpoint:
        if not args.dataset:
            raise ConfigError("--checkpoint selection needs --dataset")
        params, sel_cfg, _, adapters = load_checkpoint(args.checkpoint)
        records = _load_dataset(args.dataset)
        scorer = SelectorScorer(params, sel_cfg, adapters)
        for record, task in zip(records, _synthetic_tasks_bulk(records, _catalog(cfg))):
            result = _select(scorer(task), policy, k)
            rows.append(selection_record(record.video_id, record.question_id, result))
    else:
        raise ConfigError("select needs --scores or --checkpoint")
    write_jsonl(args.out, rows, kind="selections", config_hash=cfg.hash, seed=cfg.seed)
    return 0


def _select(iv: ImportanceVector, policy: str, k: int):
    if policy == "nms-greedy":
        return nms_greedy(iv, k)
    if policy == "topk":
        return topk(iv, k)
    if policy == "uniform":
        return uniform_k(iv.n, k)
    raise ConfigError(f"policy {policy!r} not usable here")


def _cmd_eval(args, cfg: PipelineConfig) -> int:
    records = _load_dataset(args.dataset)
    catalog = _catalog(cfg)
    tasks = _synthetic_tasks_bulk(records, catalog)
    policy = args.policy or cfg.selection.policy
    k = args.k or cfg.selection.k
    scorer = None
    if args.scorer == "oracle":
        scorer = oracle_scorer
    elif args.scorer == "random":
        scorer = RandomScorer(seed=cfg.seed)
    elif args.scorer == "constant":
        scorer = constant_scorer
    elif args.scorer == "selector":
        if not args.checkpoint:
            raise ConfigError("selector scorer needs --checkpoint")
        params, sel_cfg, _, adapters = load_checkpoint(args.checkpoint)
        scorer = SelectorScorer(params, sel_cfg, adapters)
    elif args.scorer == "fused-mock":
        scorer = MockLabelScorer(_build_backend(cfg), want=cfg.labeler.want, cache=_cache(cfg))
    downstream = None
    if args.a_hit is not None or args.a_miss is not None:
        if args.a_hit is None or args.a_miss is None:
            raise ConfigError("--a-hit and --a-miss must be given together")
        downstream = ParametricDownstream(a_hit=args.a_hit, a_miss=args.a_miss)
    report = evaluate_policy(tasks, scorer, policy, k, seed=cfg.seed, downstream=downstream)
    rec = dict(report.to_record(), scorer=args.scorer)
    write_jsonl(args.out, [rec], kind="eval-reports", config_hash=cfg.hash, seed=cfg.seed)
    print(
        f"eval scorer={args.scorer} policy={policy} k={k}: "
        f"hit_rate={report.hit_rate:.4f} recall={report.recall:.4f}",
        file=sys.stderr,
    )
    return 0


def _cmd_sweep(args, cfg: PipelineConfig) -> int:
    seed = cfg.seed if args.seed is None else args.seed
    catalog = _catalog(cfg)
    pool_sizes = tuple(int(x) for x in args.pool_sizes.split(","))
    timeline = gen_timeline_tasks(
        count=args.count, total_frames=args.timeline_frames,
        segment_width=args.segment_width, seed=seed, catalog=catalog,
    )
    if args.scorer == "selector":
        if not args.checkpoint:
            raise ConfigError("selector scorer needs --checkpoint")
        params, sel_cfg, _, adapters = load_checkpoint(args.checkpoint)
        scorer = SelectorScorer(params, sel_cfg, adapters)
        with_features = True
    else:
        scorer = oracle_scorer
        with_features = False
    result = sweep_pool_size(
        timeline, scorer, pool_sizes=pool_sizes, k=args.k,
        catalog=catalog, with_features=with_features,
    )
    rows = [dict(r.to_record(), scorer=args.scorer) for r in result.reports]
    write_jsonl(args.out, rows, kind="eval-reports", config_hash=cfg.hash, seed=seed)
    for rep in result.reports:
        print(f"sweep n={rep.n}: hit_rate={rep.hit_rate:.4f}", file=sys.stderr)
    return 0


def _cmd_report(args, cfg: PipelineConfig) -> int:
    if args.losses:
        _, rows = read_jsonl(args.losses, kind="loss-reports")
        by_task: dict[str, list[float]] = {}
        for r in rows:
            by_task.setdefault(r["task"], []).append(r["loss"])
        for task, losses in sorted(by_task.items()):
            first = np.mean(losses[: max(1, len(losses) // 10)])
            last = np.mean(losses[-max(1, len(losses) // 10):])
            print(f"{task}: steps={len(losses)} first~{first:.4f} last~{last:.4f}")
    reports = []
    for path in args.eval_files:
        _, rows = read_jsonl(path, kind="eval-reports")
        reports.extend(rows)
    for r in reports:
        line = (
            f"{r.get('scorer', '?')}/{r['policy']} n={r['n']} k={r['k']}: "
            f"hit_rate={r['hit_rate']:.4f} recall={r['recall']:.4f}"
        )
        if "modeled_accuracy" in r:
            line += f" modeled_acc={r['modeled_accuracy']:.4f}"
        print(line)
    if args.plot:
        _plot_reports(reports, args.plot)
    return 0


def _plot_reports(reports: list[dict], out_path: str) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as err:
        raise ConfigError(f"--plot needs matplotlib: {err}") from err
    fig, ax = plt.subplots(figsize=(6, 4))
    by_scorer: dict[str, list[dict]] = {}
    for r in reports:
        by_scorer.setdefault(r.get("scorer", "?"), []).append(r)
    for scorer, rows in sorted(by_scorer.items()):
        rows = sorted(rows, key=lambda r: r["n"])
        ax.plot([r["n"] for r in rows], [r["hit_rate"] for r in rows],
                marker="o", label=scorer)
    ax.set_xlabel("candidate pool size n")
    ax.set_ylabel("hit rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


_COMMANDS = {
    "plan": _cmd_plan,
    "gen-synthetic": _cmd_gen_synthetic,
    "caption": _cmd_caption,
    "label-spatial": _cmd_label_spatial,
    "label-temporal": _cmd_label_temporal,
    "fuse": _cmd_fuse,
    "train": _cmd_train,
    "select": _cmd_select,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # argparse --help / --version
            return int(exc.code or 0)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DomainError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FrameSelectError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
