"""Stage-2: dense span proposals, Top-K selection, segment cropping, the
span evidence encoder, and evidence-pool assembly.

The proposal head is query-agnostic: it sees only temporal latents, never
the language query, so a video's evidence pool is a pure function of
(video, parameters, K, M).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tempoground.errors import DimensionError, EvalError
from tempoground.evalmetrics import Interval, iou
from tempoground.numerics import layers as L
from tempoground.numerics.checkpoint import read_tensors, write_tensors
from tempoground.numerics.params import ParamStore, adamw_step
from tempoground.numerics.rng import Rng
from tempoground.perception import TemporalEncoder, encode_full, full_positions
from tempoground.syndata import VideoSample, pool_spatial


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Proposal:
    span: tuple[float, float]  # normalized, start <= end
    objectness: float  # raw logit
    source_index: int
    padded: bool = False


@dataclass
class EvidenceUnit:
    span_id: int  # 1-based; rendered as the token <Span_k>
    interval: Interval  # seconds
    tokens: np.ndarray  # (M, D)


@dataclass
class EvidencePool:
    units: list[EvidenceUnit]  # exactly K, ordered by objectness desc
    video_id: str
    k: int
    duration_s: float

    def intervals(self) -> list[Interval]:
        return [u.interval for u in self.units]

    def validate(self) -> None:
        if len(self.units) != self.k:
            raise DimensionError(f"pool has {len(self.units)} units, expected {self.k}")
        for i, unit in enumerate(self.units, start=1):
            if unit.span_id != i:
                raise DimensionError(f"span ids must enumerate 1..K, got {unit.span_id} at {i}")
            t0, t1 = unit.interval
            if not 0.0 <= t0 < t1 <= self.duration_s + 1e-9:
                raise DimensionError(f"unit interval {unit.interval} outside [0, {self.duration_s}]")


# ---------------------------------------------------------------------------
# proposal head


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def order_spans(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Swap (start, end) pairs where start > end; returns (spans, swapped mask)."""
    swapped = raw[:, 0] > raw[:, 1]
    spans = raw.copy()
    spans[swapped] = raw[swapped][:, ::-1]
    return spans, swapped


class ProposalHead:
    """Self-attention stack followed by per-timestep span regression and scoring."""

    def __init__(self, store: ParamStore, prefix: str, width: int, heads: int, depth: int, mlp_ratio: float, rng: Rng):
        self.blocks = [
            L.SelfAttentionBlock(store, f"{prefix}.block{i}", width, heads, mlp_ratio, rng.child(f"b{i}"))
            for i in range(depth)
        ]
        self.ln = L.LayerNorm(store, f"{prefix}.ln", width)
        self.out = L.Linear(store, f"{prefix}.out", width, 3, rng.child("out"))

    def forward(self, u: np.ndarray):
        """Returns (spans (N,2) in [0,1] with start<=end, objectness logits (N,), cache)."""
        h = u
        caches = []
        for block in self.blocks:
            h, c = block.forward(h)
            caches.append(c)
        h, c_ln = self.ln.forward(h)
        y, c_out = self.out.forward(h)
        sig = _sigmoid(y[:, :2])
        spans, swapped = order_spans(sig)
        objs = y[:, 2]
        return spans, objs, (caches, c_ln, c_out, sig, swapped)

    def backward(self, dspans: np.ndarray, dobjs: np.ndarray, cache) -> np.ndarray:
        caches, c_ln, c_out, sig, swapped = cache
        dsig = dspans.copy()
        dsig[swapped] = dspans[swapped][:, ::-1]
        dy = np.zeros((dspans.shape[0], 3))
        dy[:, :2] = dsig * sig * (1.0 - sig)
        dy[:, 2] = dobjs
        dh = self.out.backward(dy, c_out)
        dh = self.ln.backward(dh, c_ln)
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            dh = block.backward(dh, c)
        return dh


def propose(head: ProposalHead, u: np.ndarray) -> list[Proposal]:
    """Dense per-timestep proposals (one per latent row)."""
    if not np.all(np.isfinite(u)):
        raise DimensionError("propose: latents contain non-finite values")
    spans, objs, _ = head.forward(u)
    return [
        Proposal(span=(float(s), float(e)), objectness=float(o), source_index=i)
        for i, ((s, e), o) in enumerate(zip(spans, objs))
    ]


def topk_select(proposals: list[Proposal], k: int) -> list[Proposal]:
    """K highest-objectness proposals; ties broken by lower source index.

    Short lists are padded by repeating the best proposal with the padded
    flag set.
    """
    if not proposals:
        raise EvalError("topk_select on empty proposal list")
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    ranked = sorted(proposals, key=lambda p: (-p.objectness, p.source_index))
    top = ranked[:k]
    while len(top) < k:
        best = ranked[0]
        top.append(Proposal(best.span, best.objectness, best.source_index, padded=True))
    return top


# ---------------------------------------------------------------------------
# stage-2 loss


def center_labels(n: int, gts: list[Interval], central_frac: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestep positives: center position falls in the central
    fraction of a ground-truth interval. Returns (labels bool (N,),
    matched gt index (N,) with -1 for negatives)."""
    positions = (np.arange(n) + 0.5) / n
    labels = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=int)
    for g, (s, e) in enumerate(gts):
        center = 0.5 * (s + e)
        half = 0.5 * central_frac * (e - s)
        mask = np.abs(positions - center) <= half
        labels |= mask
        matched[mask] = g
    return labels, matched


@dataclass
class Stage2LossParts:
    total: float
    reg: float
    score: float
    num_positives: int
    no_positives: bool = False


def stage2_loss_fwd(
    spans: np.ndarray,
    obj_logits: np.ndarray,
    gts: list[Interval],
    central_frac: float = 0.5,
    frozen_targets: np.ndarray | None = None,
):
    """Regression-and-scoring pieces plus a cache for the backward pass.

    Positives regress to their covering interval with L1 endpoints plus
    (1 - IoU); objectness gets binary cross-entropy against soft targets:
    IoU(predicted span, matched interval) on positives, 0 on negatives.
    The targets are stop-gradient labels; ``frozen_targets`` pins them to
    an earlier forward pass (finite-difference harnesses need this).
    """
    if not gts:
        raise EvalError("stage2 loss needs at least one ground-truth interval")
    n = spans.shape[0]
    labels, matched = center_labels(n, gts, central_frac)
    pos_idx = np.flatnonzero(labels)
    gt_arr = np.asarray(gts, dtype=np.float64)

    reg = 0.0
    if pos_idx.size:
        pred = spans[pos_idx]
        tgt = gt_arr[matched[pos_idx]]
        l1 = np.abs(pred - tgt).sum(axis=1)
        inter = np.maximum(0.0, np.minimum(pred[:, 1], tgt[:, 1]) - np.maximum(pred[:, 0], tgt[:, 0]))
        union = (pred[:, 1] - pred[:, 0]) + (tgt[:, 1] - tgt[:, 0]) - inter
        iou_vals = np.where(union > 0.0, inter / np.maximum(union, 1e-12), 0.0)
        reg = float((l1 + (1.0 - iou_vals)).mean())

    # soft objectness targets from predicted-span overlap (no grad through target)
    if frozen_targets is not None:
        targets = frozen_targets
    else:
        targets = np.zeros(n)
        if pos_idx.size:
            targets[pos_idx] = iou_vals
    c = obj_logits
    score = float((np.maximum(c, 0.0) - c * targets + np.log1p(np.exp(-np.abs(c)))).mean())

    cache = (spans, obj_logits, targets, pos_idx, matched, gt_arr)
    return Stage2LossParts(total=0.0, reg=reg, score=score, num_positives=int(pos_idx.size),
                           no_positives=pos_idx.size == 0), cache


def stage2_loss_bwd(cache, reg_weight: float, score_weight: float):
    """Gradients of reg_weight*reg + score_weight*score w.r.t. (spans, logits)."""
    spans, obj_logits, targets, pos_idx, matched, gt_arr = cache
    n = spans.shape[0]
    dspans = np.zeros_like(spans)
    dobjs = score_weight * (_sigmoid(obj_logits) - targets) / n
    if pos_idx.size and reg_weight != 0.0:
        pred = spans[pos_idx]
        tgt = gt_arr[matched[pos_idx]]
        scale = reg_weight / pos_idx.size
        dl1 = np.sign(pred - tgt) * scale
        # d(1 - IoU): piecewise-smooth interval overlap derivative
        lo = np.maximum(pred[:, 0], tgt[:, 0])
        hi = np.minimum(pred[:, 1], tgt[:, 1])
        inter = np.maximum(0.0, hi - lo)
        union = (pred[:, 1] - pred[:, 0]) + (tgt[:, 1] - tgt[:, 0]) - inter
        union = np.maximum(union, 1e-12)
        live = inter > 0.0
        di_ds = np.where(live & (pred[:, 0] > tgt[:, 0]), -1.0, 0.0)
        di_de = np.where(live & (pred[:, 1] < tgt[:, 1]), 1.0, 0.0)
        du_ds = -1.0 - di_ds
        du_de = 1.0 - di_de
        diou_ds = (di_ds * union - inter * du_ds) / (union * union)
        diou_de = (di_de * union - inter * du_de) / (union * union)
        dreg = np.stack([-diou_ds, -diou_de], axis=1) * scale
        dspans[pos_idx] = dl1 + dreg
    return dspans, dobjs


def stage2_loss(spans: np.ndarray, obj_logits: np.ndarray, gts: list[Interval], eta: float = 1.0,
                central_frac: float = 0.5) -> Stage2LossParts:
    parts, _ = stage2_loss_fwd(spans, obj_logits, gts, central_frac)
    parts.total = parts.reg + eta * parts.score
    return parts


def stage2_step(
    encoder: TemporalEncoder,
    head: ProposalHead,
    store: ParamStore,
    batch: list[tuple[np.ndarray, list[Interval]]],
    lr: float,
    eta: float = 1.0,
    central_frac: float = 0.5,
    train_encoder: bool = True,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
) -> Stage2LossParts:
    """One AdamW step of the proposal objective over (features, intervals) pairs."""
    store.zero_grad()
    b = len(batch)
    total = reg = score = 0.0
    positives = 0
    for x, gts in batch:
        u, c_enc = encoder.forward(x, full_positions(x.shape[0]))
        spans, objs, c_head = head.forward(u)
        parts, c_loss = stage2_loss_fwd(spans, objs, gts, central_frac)
        reg += parts.reg / b
        score += parts.score / b
        positives += parts.num_positives
        dspans, dobjs = stage2_loss_bwd(c_loss, reg_weight=1.0 / b, score_weight=eta / b)
        du = head.backward(dspans, dobjs, c_head)
        if train_encoder:
            encoder.backward(du, c_enc)
    total = reg + eta * score
    adamw_step(store, lr=lr, betas=betas, weight_decay=weight_decay)
    return Stage2LossParts(total=total, reg=reg, score=score, num_positives=positives,
                           no_positives=positives == 0)


# ---------------------------------------------------------------------------
# metric time, cropping, and evidence encoding


def _round1(x: float) -> float:
    return math.floor(x * 10.0 + 0.5) / 10.0


def to_metric_time(span: tuple[float, float], duration_s: float) -> Interval:
    """Map a normalized span to seconds on a 0.1 s grid inside [0, duration]."""
    if duration_s <= 0:
        raise DimensionError("duration must be positive")
    limit = math.floor(duration_s * 10.0) / 10.0
    t0 = min(max(_round1(span[0] * duration_s), 0.0), limit)
    t1 = min(max(_round1(span[1] * duration_s), 0.0), limit)
    if t1 <= t0:
        t1 = _round1(t0 + 0.1)
    if t1 > limit:
        t1 = limit
        t0 = max(0.0, _round1(limit - 0.1))
    return (t0, t1)


def crop_segment(u: np.ndarray, interval_s: Interval, fps: float) -> tuple[np.ndarray, tuple[int, int]]:
    """Rows floor(start*fps) .. ceil(end*fps)-1, clamped, at least one row.

    Returns the cropped rows and the (start, stop) row range used, so
    gradients can be scattered back.
    """
    n = u.shape[0]
    lo = int(math.floor(interval_s[0] * fps))
    hi = int(math.ceil(interval_s[1] * fps)) - 1
    lo = min(max(lo, 0), n - 1)
    hi = min(max(hi, 0), n - 1)
    if hi < lo:
        hi = lo
    return u[lo : hi + 1], (lo, hi + 1)


class SpanEvidenceEncoder:
    """Fixed-length segment summarizer: M learnable query tokens attend to
    the cropped latents through a stack of cross-attention layers."""

    def __init__(self, store: ParamStore, prefix: str, width: int, num_queries: int, heads: int, depth: int, rng: Rng):
        self.num_queries = num_queries
        self.queries = store.add(f"{prefix}.queries", rng.child("q").normal((num_queries, width), scale=0.2))
        self.layers = [
            L.MultiHeadCrossAttention(store, f"{prefix}.layer{i}", width, heads, rng.child(f"l{i}"))
            for i in range(depth)
        ]

    def forward(self, u_k: np.ndarray):
        if u_k.shape[0] < 1:
            raise DimensionError("see_encode needs a nonempty segment")
        q = self.queries.data
        caches = []
        for layer in self.layers:
            q, c = layer.forward(q, u_k)
            caches.append(c)
        return q, caches

    def backward(self, dp: np.ndarray, caches) -> np.ndarray:
        dmem_total = None
        dq = dp
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dq, dmem = layer.backward(dq, c)
            dmem_total = dmem if dmem_total is None else dmem_total + dmem
        self.queries.grad += dq
        return dmem_total


def see_encode(see: SpanEvidenceEncoder, u_k: np.ndarray) -> np.ndarray:
    tokens, _ = see.forward(u_k)
    return tokens


def build_evidence_pool(
    encoder: TemporalEncoder,
    head: ProposalHead,
    see: SpanEvidenceEncoder,
    video: VideoSample,
    k: int,
) -> EvidencePool:
    """encode -> propose -> top-K -> metric time -> crop -> evidence tokens.

    Query-agnostic: depends only on the video, parameters, K, and M.
    """
    x = pool_spatial(video.features)
    u = encode_full(encoder, x)
    proposals = propose(head, u)
    top = topk_select(proposals, k)
    units = []
    for rank, prop in enumerate(top, start=1):
        interval = to_metric_time(prop.span, video.duration_s)
        u_k, _ = crop_segment(u, interval, video.fps)
        tokens = see_encode(see, u_k)
        units.append(EvidenceUnit(span_id=rank, interval=interval, tokens=tokens))
    pool = EvidencePool(units=units, video_id=video.id, k=k, duration_s=video.duration_s)
    pool.validate()
    return pool


# ---------------------------------------------------------------------------
# stage-2 standalone quality metrics


def center_ap(dense_scores: np.ndarray, gts: list[Interval], central_frac: float = 0.5) -> float:
    """Average precision of per-timestep scores against center labels."""
    if not gts:
        raise EvalError("center_ap needs ground-truth intervals")
    labels, _ = center_labels(len(dense_scores), gts, central_frac)
    return average_precision(np.asarray(dense_scores, dtype=np.float64), labels)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise EvalError("average precision undefined without positives")
    order = np.lexsort((np.arange(len(scores)), -scores))
    hits = labels[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    precision = tp / ranks
    return float(precision[hits].sum() / n_pos)


def matched_miou(proposal_intervals: list[Interval], gts: list[Interval]) -> float:
    """Mean over ground-truth intervals of greedily matched IoU.

    Pairs are taken in descending IoU order; each proposal and each
    ground truth is used at most once; unmatched ground truths score 0.
    """
    if not gts:
        raise EvalError("matched_miou needs ground-truth intervals")
    pairs = []
    for gi, gt in enumerate(gts):
        for pi, prop in enumerate(proposal_intervals):
            pairs.append((iou(prop, gt), gi, pi))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_gt: set[int] = set()
    used_prop: set[int] = set()
    scores = {gi: 0.0 for gi in range(len(gts))}
    for value, gi, pi in pairs:
        if gi in used_gt or pi in used_prop:
            continue
        used_gt.add(gi)
        used_prop.add(pi)
        scores[gi] = value
    return float(np.mean([scores[gi] for gi in range(len(gts))]))


# ---------------------------------------------------------------------------
# pool serialization (tokens in the tensor container, layout in JSONL)


def write_pools(out_dir: str | Path, pools: list[EvidencePool]) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jsonl_path = out / "pools.jsonl"
    tokens_path = out / "pool_tokens.f2gd"
    tensors: dict[str, np.ndarray] = {}
    with open(jsonl_path, "w", encoding="utf-8") as f:
        for pool in pools:
            for unit in pool.units:
                ref = f"pool/{pool.video_id}/{unit.span_id}"
                tensors[ref] = unit.tokens
                f.write(
                    json.dumps(
                        {
                            "video": pool.video_id,
                            "span_id": unit.span_id,
                            "t_start": unit.interval[0],
                            "t_end": unit.interval[1],
                            "k": pool.k,
                            "duration": pool.duration_s,
                            "token_ref": ref,
                        }
                    )
                    + "\n"
                )
    write_tensors(tokens_path, tensors)
    return jsonl_path, tokens_path


def read_pools(out_dir: str | Path) -> dict[str, EvidencePool]:
    out = Path(out_dir)
    tensors = read_tensors(out / "pool_tokens.f2gd")
    grouped: dict[str, EvidencePool] = {}
    with open(out / "pools.jsonl", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            vid = row["video"]
            unit = EvidenceUnit(
                span_id=int(row["span_id"]),
                interval=(float(row["t_start"]), float(row["t_end"])),
                tokens=tensors[row["token_ref"]],
            )
            if vid not in grouped:
                grouped[vid] = EvidencePool(
                    units=[], video_id=vid, k=int(row["k"]), duration_s=float(row["duration"])
                )
            grouped[vid].units.append(unit)
    for pool in grouped.values():
        pool.units.sort(key=lambda u: u.span_id)
        pool.validate()
    return grouped
