"""Stage commands: gen, stage1, stage2, pool, stage3, ground, eval, diagnose.

Every command validates its config before any compute, echoes the fully
resolved config into the run directory, and is idempotent given identical
inputs and seed. Run directory layout:

    config.echo  checkpoints/  pools/  preds/  reports/  logs/  data/
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tempoground.cli.config import RunConfig
from tempoground.errors import ConfigError, PrerequisiteError
from tempoground.evalmetrics import (
    build_report,
    export_report,
    histogram,
    iou,
    pca_project,
    separability_probe,
    stagewise_diagnostics,
    write_pca_csv,
)
from tempoground.grounding import (
    GrounderConfig,
    SurrogateGrounder,
    ground,
    serialize_instruction,
    stage3_joint_step,
)
from tempoground.numerics.checkpoint import read_tensors, write_tensors
from tempoground.numerics.params import ParamStore, cosine_lr
from tempoground.numerics.rng import Rng
from tempoground.perception import (
    PerceptionModel,
    TemporalModuleConfig,
    ViewPolicy,
    encode_full,
    pooled_latent_variance,
    stage1_step,
)
from tempoground.proposal import (
    ProposalHead,
    SpanEvidenceEncoder,
    build_evidence_pool,
    center_ap,
    center_labels,
    matched_miou,
    read_pools,
    stage2_step,
    topk_select,
    propose,
    to_metric_time,
    write_pools,
)
from tempoground.syndata import (
    CorpusConfig,
    QuerySample,
    VideoSample,
    generate_corpus,
    inside_labels,
    pool_spatial,
    read_dataset,
    write_dataset,
)

EVAL_SPLIT_OFFSET = 1_000_000


# ---------------------------------------------------------------------------
# config adapters


def corpus_config(cfg: RunConfig, split: str) -> CorpusConfig:
    return CorpusConfig(
        num_videos=int(cfg[f"data.num_{split}_videos"]),
        fps=float(cfg["data.fps"]),
        width=int(cfg["data.width"]),
        spatial_tokens=int(cfg["data.spatial_tokens"]),
        num_archetypes=int(cfg["data.num_archetypes"]),
        duration_range=(float(cfg["data.min_duration_s"]), float(cfg["data.max_duration_s"])),
        events_range=(int(cfg["data.min_events"]), int(cfg["data.max_events"])),
        min_event_s=float(cfg["data.min_event_s"]),
        max_event_s=float(cfg["data.max_event_s"]),
        min_gap_s=float(cfg["data.min_gap_s"]),
        max_gap_s=float(cfg["data.max_gap_s"]),
        noise_level=float(cfg["data.noise_level"]),
        query_noise=float(cfg["data.query_noise"]),
    )


def module_config(cfg: RunConfig) -> TemporalModuleConfig:
    return TemporalModuleConfig(
        width=int(cfg["data.width"]),
        depth=int(cfg["model.depth"]),
        heads=int(cfg["model.heads"]),
        mlp_ratio=float(cfg["model.mlp_ratio"]),
        predictor_depth=int(cfg["model.predictor_depth"]),
        predictor_width=int(cfg["model.predictor_width"]),
        num_view_types=len(cfg.strides()),
        lam=float(cfg["stage1.lam"]),
        sigreg_directions=int(cfg["stage1.sigreg_directions"]),
    )


def view_policy(cfg: RunConfig) -> ViewPolicy:
    global_len = int(cfg["stage1.global_len"])
    return ViewPolicy(
        locals_per_step=int(cfg["stage1.locals_per_step"]),
        ratio_range=(float(cfg["stage1.ratio_min"]), float(cfg["stage1.ratio_max"])),
        strides=cfg.strides(),
        global_len=global_len if global_len > 0 else None,
    )


def grounder_config(cfg: RunConfig) -> GrounderConfig:
    return GrounderConfig(
        width=int(cfg["data.width"]),
        num_tokens=int(cfg["model.m"]),
        hidden=int(cfg["model.grounder_hidden"]),
        interval_freqs=int(cfg["model.interval_freqs"]),
        offset_range=float(cfg["model.offset_range"]),
        alpha=float(cfg["stage3.alpha"]),
        beta=float(cfg["stage3.beta"]),
        gamma=float(cfg["stage3.gamma"]),
    )


@dataclass
class Models:
    store: ParamStore
    perception: PerceptionModel
    head: ProposalHead
    see: SpanEvidenceEncoder
    grounder: SurrogateGrounder


def build_models(cfg: RunConfig) -> Models:
    """All parameter groups, initialized deterministically from run.seed."""
    store = ParamStore()
    init = Rng(int(cfg["run.seed"])).child("init")
    width = int(cfg["data.width"])
    perception = PerceptionModel(store, module_config(cfg), init.child("perception"))
    head = ProposalHead(
        store, "proposal", width, heads=int(cfg["model.heads"]),
        depth=int(cfg["model.proposal_depth"]), mlp_ratio=float(cfg["model.mlp_ratio"]),
        rng=init.child("proposal"),
    )
    see = SpanEvidenceEncoder(
        store, "see", width, num_queries=int(cfg["model.m"]),
        heads=int(cfg["model.heads"]), depth=int(cfg["model.see_depth"]),
        rng=init.child("see"),
    )
    grounder = SurrogateGrounder(store, "grounder", grounder_config(cfg), init.child("grounder"))
    return Models(store=store, perception=perception, head=head, see=see, grounder=grounder)


# ---------------------------------------------------------------------------
# artifact plumbing


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"missing artifact {path} (produce it with '{produced_by}')")
    return path


def _load_group(store: ParamStore, tensors: dict[str, np.ndarray], prefixes: tuple[str, ...]) -> None:
    names = [n for n in store.names() if n.startswith(prefixes)]
    missing = [n for n in names if n not in tensors]
    if missing:
        raise PrerequisiteError(f"checkpoint lacks parameters: {missing[:4]}...")
    for name in names:
        store.load_state_dict({name: tensors[name]}, strict=False)


def load_corpus(cfg: RunConfig, split: str) -> list[tuple[VideoSample, list[QuerySample]]]:
    path = _require(cfg.path("data", split), "tempoground gen")
    return read_dataset(path)


def norm_events(video: VideoSample) -> list[tuple[float, float]]:
    d = video.duration_s
    return [(ev.start_s / d, ev.end_s / d) for ev in video.script.events]


def _append_csv(path: Path, header: list[str], row: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def _log(cfg: RunConfig, name: str, message: str) -> None:
    path = cfg.path("logs", f"{name}.log")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(message + "\n")
    print(message)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig) -> None:
    cfg.write_echo()
    seed = int(cfg["run.seed"])
    for split, offset, prefix in (("train", 0, "train"), ("eval", EVAL_SPLIT_OFFSET, "eval")):
        corpus = generate_corpus(corpus_config(cfg, split), seed, id_prefix=prefix, start_index=offset)
        out = cfg.path("data", split)
        write_dataset(out, corpus)
        n_queries = sum(len(qs) for _, qs in corpus)
        _log(cfg, "gen", f"gen: wrote {len(corpus)} {split} videos, {n_queries} queries -> {out}")


def cmd_stage1(cfg: RunConfig) -> None:
    cfg.write_echo()
    corpus = load_corpus(cfg, "train")
    models = build_models(cfg)
    seed = int(cfg["run.seed"])
    policy = view_policy(cfg)
    steps = int(cfg["stage1.steps"])
    batch_size = int(cfg["stage1.batch_size"])
    features = [pool_spatial(v.features) for v, _ in corpus]
    losses_csv = cfg.path("logs", "stage1_losses.csv")
    losses_csv.unlink(missing_ok=True)
    for step in range(steps):
        rng = Rng(seed).child(f"stage1/step/{step}")
        idx = rng.choice(len(features), size=min(batch_size, len(features)), replace=False)
        batch = [features[i] for i in idx]
        lr = cosine_lr(step, steps, float(cfg["stage1.peak_lr"]), float(cfg["stage1.warmup_frac"]))
        out = stage1_step(
            models.perception, models.store, batch, policy, rng.child("step"),
            lr=lr, weight_decay=float(cfg["stage1.weight_decay"]),
        )
        _append_csv(losses_csv, ["step", "loss_pred", "loss_sig", "total", "lr"],
                    [step, repr(out.loss_pred), repr(out.loss_sig), repr(out.total), repr(lr)])
        if step % 50 == 0 or step == steps - 1:
            _log(cfg, "stage1", f"stage1 step {step}: pred={out.loss_pred:.5f} sig={out.loss_sig:.5f}")
    var = pooled_latent_variance(models.perception.encoder, features[: min(16, len(features))])
    _log(cfg, "stage1", f"stage1: pooled latent per-dim variance range [{var.min():.3f}, {var.max():.3f}]")
    write_tensors(cfg.path("checkpoints", "stage1.f2gd"), models.store.state_dict())
    _log(cfg, "stage1", "stage1: checkpoint written")


def cmd_stage2(cfg: RunConfig) -> None:
    cfg.write_echo()
    corpus = load_corpus(cfg, "train")
    models = build_models(cfg)
    if str(cfg["stage2.init"]) == "stage1":
        tensors = read_tensors(_require(cfg.path("checkpoints", "stage1.f2gd"), "tempoground stage1"))
        _load_group(models.store, tensors, ("encoder.",))
    seed = int(cfg["run.seed"])
    steps = int(cfg["stage2.steps"])
    batch_size = int(cfg["stage2.batch_size"])
    samples = [(pool_spatial(v.features), norm_events(v)) for v, _ in corpus]
    losses_csv = cfg.path("logs", "stage2_losses.csv")
    losses_csv.unlink(missing_ok=True)
    for step in range(steps):
        rng = Rng(seed).child(f"stage2/step/{step}")
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        lr = cosine_lr(step, steps, float(cfg["stage2.peak_lr"]), float(cfg["stage2.warmup_frac"]))
        parts = stage2_step(
            models.perception.encoder, models.head, models.store,
            [samples[i] for i in idx], lr=lr,
            eta=float(cfg["stage2.score_weight"]),
            central_frac=float(cfg["stage2.central_frac"]),
            train_encoder=bool(cfg["stage2.train_encoder"]),
            weight_decay=float(cfg["stage2.weight_decay"]),
        )
        _append_csv(losses_csv, ["step", "total", "reg", "score", "lr"],
                    [step, repr(parts.total), repr(parts.reg), repr(parts.score), repr(lr)])
        if step % 50 == 0 or step == steps - 1:
            _log(cfg, "stage2", f"stage2 step {step}: reg={parts.reg:.5f} score={parts.score:.5f}")
    write_tensors(cfg.path("checkpoints", "stage2.f2gd"), models.store.state_dict())
    metrics = stage2_quality(cfg, models)
    out = cfg.path("reports", "stage2_metrics.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in metrics.items():
            writer.writerow([name, repr(value)])
    _log(cfg, "stage2", f"stage2: {metrics}")


def stage2_quality(cfg: RunConfig, models: Models) -> dict[str, float]:
    """Standalone proposal metrics on the held-out split."""
    corpus = load_corpus(cfg, "eval")
    k = int(cfg["model.k"])
    central_frac = float(cfg["stage2.central_frac"])
    all_scores: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    matched: list[float] = []
    retrieve_hits = 0
    n_queries = 0
    for video, queries in corpus:
        x = pool_spatial(video.features)
        u = encode_full(models.perception.encoder, x)
        proposals = propose(models.head, u)
        scores = np.array([p.objectness for p in proposals])
        labels, _ = center_labels(len(proposals), norm_events(video), central_frac)
        all_scores.append(scores)
        all_labels.append(labels)
        top = topk_select(proposals, k)
        top_intervals = [to_metric_time(p.span, video.duration_s) for p in top]
        gts_s = [(ev.start_s, ev.end_s) for ev in video.script.events]
        matched.append(matched_miou(top_intervals, gts_s))
        for q in queries:
            n_queries += 1
            if max(iou(t, q.target_interval) for t in top_intervals) >= 0.5:
                retrieve_hits += 1
    from tempoground.proposal import average_precision

    ap = average_precision(np.concatenate(all_scores), np.concatenate(all_labels))
    return {
        "center_ap": ap,
        "matched_miou": float(np.mean(matched)),
        f"retrieve_at_{k}_iou0.5": retrieve_hits / n_queries,
    }


def _checkpoint_for_pools(cfg: RunConfig) -> Path:
    stage3 = cfg.path("checkpoints", "stage3.f2gd")
    if stage3.exists():
        return stage3
    return _require(cfg.path("checkpoints", "stage2.f2gd"), "tempoground stage2")


def _load_for_pools(cfg: RunConfig, checkpoint: Path) -> Models:
    models = build_models(cfg)
    tensors = read_tensors(checkpoint)
    groups = ["encoder.", "proposal."]
    if any(n.startswith("see.") for n in tensors):
        groups += ["see."]
    if any(n.startswith("grounder.") for n in tensors):
        groups += ["grounder."]
    _load_group(models.store, tensors, tuple(groups))
    return models


def _build_pools(cfg: RunConfig, models: Models, split: str):
    corpus = load_corpus(cfg, split)
    k = int(cfg["model.k"])
    pools = [
        build_evidence_pool(models.perception.encoder, models.head, models.see, video, k)
        for video, _ in corpus
    ]
    out = cfg.path("pools", split)
    write_pools(out, pools)
    return corpus, {p.video_id: p for p in pools}


def cmd_pool(cfg: RunConfig) -> None:
    cfg.write_echo()
    checkpoint = _checkpoint_for_pools(cfg)
    models = _load_for_pools(cfg, checkpoint)
    split = str(cfg["ground.split"])
    _, pools = _build_pools(cfg, models, split)
    _log(cfg, "pool", f"pool: wrote {len(pools)} {split} pools from {checkpoint.name}")


def cmd_stage3(cfg: RunConfig) -> None:
    cfg.write_echo()
    tensors = read_tensors(_require(cfg.path("checkpoints", "stage2.f2gd"), "tempoground stage2"))
    models = build_models(cfg)
    _load_group(models.store, tensors, ("encoder.", "proposal."))
    corpus = load_corpus(cfg, "train")
    seed = int(cfg["run.seed"])
    rows = []
    for video, queries in corpus:
        gts_norm = norm_events(video)
        for q in queries:
            if q.query_embedding is None:
                raise PrerequisiteError(f"query {q.id} lacks an embedding sidecar")
            rows.append((video, q.query_embedding, q.target_interval, gts_norm))
    steps = int(cfg["stage3.steps"])
    batch_size = int(cfg["stage3.batch_size"])
    k = int(cfg["model.k"])
    losses_csv = cfg.path("logs", "stage3_losses.csv")
    losses_csv.unlink(missing_ok=True)
    for step in range(steps):
        rng = Rng(seed).child(f"stage3/step/{step}")
        idx = rng.choice(len(rows), size=min(batch_size, len(rows)), replace=False)
        lr = cosine_lr(step, steps, float(cfg["stage3.peak_lr"]), float(cfg["stage3.warmup_frac"]))
        agg = stage3_joint_step(
            models.perception.encoder, models.head, models.see, models.grounder,
            models.store, [rows[i] for i in idx], k=k, lr=lr,
            perception_lr_mult=float(cfg["stage3.perception_lr_mult"]),
            weight_decay=float(cfg["stage3.weight_decay"]),
        )
        _append_csv(losses_csv, ["step", "total", "id_loss", "time_loss", "reg", "lr"],
                    [step, repr(agg.total), repr(agg.id_loss), repr(agg.time_loss), repr(agg.reg), repr(lr)])
        if step % 50 == 0 or step == steps - 1:
            _log(cfg, "stage3", f"stage3 step {step}: id={agg.id_loss:.4f} time={agg.time_loss:.4f}")
    write_tensors(cfg.path("checkpoints", "stage3.f2gd"), models.store.state_dict())
    _log(cfg, "stage3", "stage3: checkpoint written")


def cmd_ground(cfg: RunConfig) -> None:
    cfg.write_echo()
    mode = str(cfg["ground.grounder"])
    if mode == "surrogate":
        checkpoint = _require(cfg.path("checkpoints", "stage3.f2gd"), "tempoground stage3")
    else:
        checkpoint = _checkpoint_for_pools(cfg)
    models = _load_for_pools(cfg, checkpoint)
    split = str(cfg["ground.split"])
    corpus, pools = _build_pools(cfg, models, split)
    temperature = float(cfg["ground.temperature"])
    repeats = int(cfg["ground.repeats"])
    seed = int(cfg["run.seed"])
    k = int(cfg["model.k"])
    m = int(cfg["model.m"])
    preds_path = cfg.path("preds", "predictions.jsonl")
    preds_path.parent.mkdir(parents=True, exist_ok=True)
    emit_prompts = bool(cfg["ground.emit_prompts"])
    prompt_rows: list[str] = []
    n = 0
    with open(preds_path, "w", encoding="utf-8") as pf:
        for video, queries in corpus:
            pool = pools[video.id]
            for q in queries:
                if emit_prompts:
                    prompt = serialize_instruction(pool, q.text, "inference", k, m)
                    prompt_rows.append(json.dumps({"id": q.id, "prompt": prompt}))
                for run in range(repeats):
                    rng = Rng(seed).child(f"ground/{q.id}/{run}")
                    if mode == "oracle":
                        out = ground(None, pool, None, q.text, oracle_gt=q.target_interval)
                    else:
                        if q.query_embedding is None:
                            raise PrerequisiteError(f"query {q.id} lacks an embedding sidecar")
                        out = ground(
                            models.grounder, pool, q.query_embedding, q.text,
                            temperature=temperature, rng=rng,
                        )
                    pf.write(
                        json.dumps(
                            {
                                "id": q.id,
                                "video": video.id,
                                "run": run,
                                "cited_id": out.cited_id,
                                "t_start": out.interval[0],
                                "t_end": out.interval[1],
                                "identify": [float(p) for p in out.identify_distribution],
                                "temperature": temperature,
                                "response": out.response,
                            }
                        )
                        + "\n"
                    )
                    n += 1
    if emit_prompts:
        cfg.path("preds", "prompts.jsonl").write_text("\n".join(prompt_rows) + "\n", encoding="utf-8")
    _log(cfg, "ground", f"ground: wrote {n} predictions ({mode}, T={temperature}, repeats={repeats})")


def _load_predictions(cfg: RunConfig) -> list[dict]:
    path = _require(cfg.path("preds", "predictions.jsonl"), "tempoground ground")
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _eval_inputs(cfg: RunConfig):
    split = str(cfg["ground.split"])
    corpus = load_corpus(cfg, split)
    pools_dir = _require(cfg.path("pools", split), "tempoground pool")
    pools = read_pools(pools_dir)
    pool_intervals = {vid: p.intervals() for vid, p in pools.items()}
    gts = {q.id: q.target_interval for _, queries in corpus for q in queries}
    preds = _load_predictions(cfg)
    primary = [p for p in preds if p["run"] == 0]
    by_run: dict[str, dict[int, dict]] = {}
    for p in preds:
        by_run.setdefault(p["id"], {})[p["run"]] = p
    pairs = None
    if any(len(runs) >= 2 for runs in by_run.values()):
        pairs = []
        for qid, runs in by_run.items():
            if 0 in runs and 1 in runs:
                gt = gts[qid]
                pairs.append(
                    (
                        iou((runs[0]["t_start"], runs[0]["t_end"]), gt),
                        iou((runs[1]["t_start"], runs[1]["t_end"]), gt),
                    )
                )
    return corpus, pools, pool_intervals, gts, primary, pairs


def cmd_eval(cfg: RunConfig) -> None:
    cfg.write_echo()
    _, _, pool_intervals, gts, primary, pairs = _eval_inputs(cfg)
    report = build_report(
        pool_intervals, primary, gts,
        stability_pairs=pairs,
        drop_first_gap_bin=bool(cfg["report.drop_first_gap_bin"]),
    )
    paths = export_report(report, cfg.path("reports"))
    if bool(cfg["report.figures"]):
        from tempoground.cli import figures

        figures.metric_summary_figure(report, cfg.path("reports", "metrics_summary.png"))
        figures.histogram_figure(
            report.gap_histogram, "Citation gap", "IoU(best) - IoU(cited)",
            cfg.path("reports", "citation_gap_histogram.png"),
        )
        if report.stability is not None:
            figures.stability_figure(report.stability, cfg.path("reports", "stability_decomposition.png"))
    _log(
        cfg, "eval",
        "eval: " + " ".join(f"{k}={v:.4f}" for k, v in report.scalar_items()[:8]),
    )


def cmd_diagnose(cfg: RunConfig) -> None:
    cfg.write_echo()
    corpus, pools, pool_intervals, gts, primary, pairs = _eval_inputs(cfg)
    retrieve, cited, refined = stagewise_diagnostics(pool_intervals, primary, gts)
    report = build_report(pool_intervals, primary, gts, stability_pairs=pairs,
                          drop_first_gap_bin=bool(cfg["report.drop_first_gap_bin"]))
    out = cfg.path("reports", "diagnose_summary.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[str, float]] = [
        ("retrieve_at_k_miou", retrieve),
        ("cited_miou", cited),
        ("refined_miou", refined),
        ("citation_gap_below_0.10", report.gap_fraction_below),
    ]
    checkpoint = _checkpoint_for_pools(cfg)
    models = _load_for_pools(cfg, checkpoint)
    n_pca = min(int(cfg["diagnose.num_pca_videos"]), len(corpus))
    pca_paths: list[dict[str, Path]] = []
    probe_raw: list[float] = []
    probe_enc: list[float] = []
    for video, _ in corpus[:n_pca]:
        x = pool_spatial(video.features)
        u = encode_full(models.perception.encoder, x)
        inside = inside_labels(video)
        coords_raw, _ = pca_project(x)
        coords_enc, _ = pca_project(u)
        raw_path = cfg.path("reports", f"pca_{video.id}_raw.csv")
        enc_path = cfg.path("reports", f"pca_{video.id}_encoded.csv")
        write_pca_csv(raw_path, coords_raw, inside)
        write_pca_csv(enc_path, coords_enc, inside)
        pca_paths.append({"pooled features": raw_path, "temporal latents": enc_path})
        probe_raw.append(separability_probe(x, inside))
        probe_enc.append(separability_probe(u, inside))
    if probe_raw:
        rows.append(("separability_probe_raw", float(np.mean(probe_raw))))
        rows.append(("separability_probe_encoded", float(np.mean(probe_enc))))
    if report.stability is not None:
        s = report.stability
        rows.append(("stability_pairs", float(s.total)))
        rows.append(("stability_consistent_miss", float(s.consistent_miss)))
        rows.append(("stability_stable_nonzero", float(s.stable_nonzero)))
        for name, count in s.stochastic_collapse.items():
            rows.append((f"stability_collapse_{name}", float(count)))
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
    if bool(cfg["report.figures"]):
        from tempoground.cli import figures

        figures.histogram_figure(
            report.gap_histogram, "Citation gap", "IoU(best) - IoU(cited)",
            cfg.path("reports", "citation_gap_histogram.png"),
        )
        if report.stability is not None:
            figures.stability_figure(report.stability, cfg.path("reports", "stability_decomposition.png"))
            figures.histogram_figure(
                histogram(report.stability.mean_ious), "Mean IoU across runs", "mean IoU",
                cfg.path("reports", "stability_mean_iou_histogram.png"),
            )
            figures.histogram_figure(
                histogram(report.stability.abs_delta_ious), "Run-to-run deviation", "|delta IoU|",
                cfg.path("reports", "stability_abs_delta_histogram.png"),
            )
        for (video, _), paths in zip(corpus[:n_pca], pca_paths):
            figures.pca_figure(paths, cfg.path("reports", f"pca_{video.id}.png"))
        figures.metric_summary_figure(report, cfg.path("reports", "metrics_summary.png"))
        s1 = cfg.path("logs", "stage1_losses.csv")
        if s1.exists():
            figures.loss_curve_figure(s1, ["loss_pred", "loss_sig"], cfg.path("reports", "stage1_losses.png"))
    _log(cfg, "diagnose", f"diagnose: retrieve={retrieve:.4f} cited={cited:.4f} refined={refined:.4f}")
