"""Identify-then-Measure grounding over an evidence pool.

The instruction serializer and response parser implement the exact
string-level interface (pinned by golden files in the test suite); the
surrogate grounder is a trainable stand-in for the reasoning model: an
identify head scores each evidence unit against the query and a measure
head regresses bounded offsets from the cited unit's interval.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from tempoground.errors import (
    ConfigError,
    EvalError,
    InvalidSpanIdError,
    MultipleCitationsError,
    NoCitationError,
    NonFiniteError,
)
from tempoground.evalmetrics import Interval, iou
from tempoground.numerics import layers as L
from tempoground.numerics.params import ParamStore, adamw_step
from tempoground.numerics.rng import Rng
from tempoground.perception import TemporalEncoder, full_positions
from tempoground.proposal import (
    EvidencePool,
    ProposalHead,
    Proposal,
    SpanEvidenceEncoder,
    crop_segment,
    stage2_loss_bwd,
    stage2_loss_fwd,
    to_metric_time,
    topk_select,
)
from tempoground.syndata import VideoSample, pool_spatial


# ---------------------------------------------------------------------------
# instruction serialization (templates pinned byte-exactly by golden files)

_SYSTEM_BLOCK = (
    "<|im_start|>system\n"
    "You are a multimodal AI assistant. Follow the user instruction and produce the answer.\n"
    "<|im_end|>\n"
)

# the raw video-token stream belongs to the out-of-scope vision stack; it
# is serialized as the fixed schematic placeholder
_VIDEO_STREAM = (
    "<0.3 seconds><|vision_start|>"
    + "<|video_pad|>" * 8
    + "...<|video_pad|><|vision_end|>"
    + "<1.3 seconds><|vision_start|><|video_pad|>...<|video_pad|><|vision_end|>"
)

_POOL_HEADER = (
    "Here are {k} candidate event spans extracted from the video. "
    "Each candidate provides (1) its time range and (2) {m} visual span tokens. "
    "You MUST cite exactly one span id token at the end of your answer."
)

_CITE_SUFFIX = (
    "Please answer naturally, and finally cite exactly ONE candidate span id token: {ids} ."
)

_INFERENCE_QUESTION = "During what time, can you see {query}."

_SPAN_TOKEN_RE = re.compile(r"<Span_(\d+)>")
_INTERVAL_RE = re.compile(r"from (\d+(?:\.\d+)?) seconds to (\d+(?:\.\d+)?) seconds")


def format_seconds(t: float) -> str:
    return f"{t:.1f}"


def serialize_instruction(
    pool: EvidencePool, query_text: str, mode: str, k: int, m: int
) -> str:
    """Render the train or inference instruction for one (pool, query)."""
    if mode not in ("train", "inference"):
        raise ConfigError(f"mode must be 'train' or 'inference', got {mode!r}")
    if not query_text:
        raise ConfigError("query text must be nonempty")
    if pool.k != k or len(pool.units) != k:
        raise ConfigError(f"pool has K={pool.k}, expected {k}")
    candidate_lines = []
    pads = "<|video_pad|>" * m
    for unit in pool.units:
        t0, t1 = unit.interval
        candidate_lines.append(
            f"Candidate {unit.span_id}: from {format_seconds(t0)} seconds "
            f"to {format_seconds(t1)} seconds, <Span_{unit.span_id}> "
            f"<|vision_start|>{pads}<|vision_end|>"
        )
    ids = " ".join(f"<Span_{i}>" for i in range(1, k + 1))
    suffix = _CITE_SUFFIX.format(ids=ids)
    if mode == "train":
        question_line = f"{query_text}, {suffix}"
    else:
        question_line = f"{_INFERENCE_QUESTION.format(query=query_text)} {suffix}"
    return (
        _SYSTEM_BLOCK
        + "\n"
        + "<|im_start|>user\n"
        + _VIDEO_STREAM
        + "\n\n"
        + _POOL_HEADER.format(k=k, m=m)
        + "\n"
        + "\n".join(candidate_lines)
        + "\n\n"
        + question_line
        + "\n"
        + "<|im_end|>\n"
    )


def render_response(answer: str, cited_id: int) -> str:
    return f"{answer}. Corresponding span: <Span_{cited_id}>."


@dataclass
class ParsedResponse:
    answer: str
    cited_id: int
    interval: Interval | None


def parse_response(text: str, k: int) -> ParsedResponse:
    """Extract the single citation, the answer text, and any stated interval."""
    tokens = _SPAN_TOKEN_RE.findall(text)
    if len(tokens) == 0:
        raise NoCitationError("response contains no span id token")
    if len(tokens) > 1:
        raise MultipleCitationsError(f"response contains {len(tokens)} span id tokens")
    cited = int(tokens[0])
    if not 1 <= cited <= k:
        raise InvalidSpanIdError(f"span id {cited} outside 1..{k}")
    marker = text.rfind(". Corresponding span:")
    answer = text[:marker] if marker >= 0 else _SPAN_TOKEN_RE.sub("", text).strip()
    match = _INTERVAL_RE.search(text)
    interval = (float(match.group(1)), float(match.group(2))) if match else None
    return ParsedResponse(answer=answer, cited_id=cited, interval=interval)


# ---------------------------------------------------------------------------
# citation target assignment


def assign_citation_target(pool: EvidencePool, gt: Interval) -> tuple[int, bool]:
    """Best-overlap unit id (1-based); ties take the lower id.

    When every unit has zero overlap, falls back to the unit whose center
    is nearest the ground-truth center and flags it.
    """
    if not pool.units:
        raise EvalError("citation target over empty pool")
    ious = [iou(u.interval, gt) for u in pool.units]
    best = max(ious)
    if best > 0.0:
        return ious.index(best) + 1, False
    gt_center = 0.5 * (gt[0] + gt[1])
    dists = [abs(0.5 * (u.interval[0] + u.interval[1]) - gt_center) for u in pool.units]
    return dists.index(min(dists)) + 1, True


# ---------------------------------------------------------------------------
# surrogate grounder


@dataclass
class GrounderConfig:
    width: int = 32  # query / token feature width D
    num_tokens: int = 4  # evidence tokens per unit M
    hidden: int = 64
    interval_freqs: int = 4
    offset_range: float = 0.5  # squashing range r, fraction of cited length
    alpha: float = 1.0  # identify loss weight
    beta: float = 1.0  # measure loss weight
    gamma: float = 0.1  # stage-2 regression term weight in the joint step

    def validate(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not 0 < self.offset_range <= 1.0:
            raise ConfigError("offset_range must be in (0, 1]")

    @property
    def interval_enc_dim(self) -> int:
        return 4 * self.interval_freqs


def interval_encoding(interval: Interval, duration_s: float, num_freqs: int) -> np.ndarray:
    """Sinusoidal features of the normalized endpoints (constant, no grad)."""
    out = np.empty(4 * num_freqs)
    pos = 0
    for v in (interval[0] / duration_s, interval[1] / duration_s):
        for j in range(num_freqs):
            ang = math.pi * v * (2.0**j)
            out[pos] = math.sin(ang)
            out[pos + 1] = math.cos(ang)
            pos += 2
    return out


class SurrogateGrounder:
    """Identify head over units plus an offset-regressing measure head."""

    def __init__(self, store: ParamStore, prefix: str, cfg: GrounderConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d, e = cfg.width, cfg.interval_enc_dim
        self.identify_mlp = L.Mlp(
            store, f"{prefix}.identify", 2 * d + e, cfg.hidden, rng.child("id"), d_out=1
        )
        self.measure_mlp = L.Mlp(
            store,
            f"{prefix}.measure",
            d + cfg.num_tokens * d + e,
            cfg.hidden,
            rng.child("time"),
            d_out=2,
        )

    # -- identify ----------------------------------------------------------

    def identify_fwd(self, pool: EvidencePool, query_embedding: np.ndarray):
        cfg = self.cfg
        feats = np.stack(
            [
                np.concatenate(
                    [
                        query_embedding,
                        unit.tokens.mean(axis=0),
                        interval_encoding(unit.interval, pool.duration_s, cfg.interval_freqs),
                    ]
                )
                for unit in pool.units
            ]
        )
        logits_col, c_mlp = self.identify_mlp.forward(feats)
        logits = logits_col[:, 0]
        probs = L.softmax(logits)
        return probs, logits, (c_mlp, probs, pool.k)

    def identify_bwd(self, dlogits: np.ndarray, cache) -> list[np.ndarray]:
        """Returns per-unit gradients w.r.t. the evidence tokens."""
        c_mlp, _, k = cache
        dfeats = self.identify_mlp.backward(dlogits[:, None], c_mlp)
        d = self.cfg.width
        m = self.cfg.num_tokens
        dtokens = []
        for i in range(k):
            dmean = dfeats[i, d : 2 * d]
            dtokens.append(np.tile(dmean / m, (m, 1)))
        return dtokens

    # -- measure -----------------------------------------------------------

    def measure_fwd(self, unit, query_embedding: np.ndarray, duration_s: float):
        cfg = self.cfg
        feats = np.concatenate(
            [
                query_embedding,
                unit.tokens.reshape(-1),
                interval_encoding(unit.interval, duration_s, cfg.interval_freqs),
            ]
        )[None, :]
        raw, c_mlp = self.measure_mlp.forward(feats)
        squashed, c_tanh = L.tanh_fwd(raw)
        delta = cfg.offset_range * squashed[0]
        t0, t1 = unit.interval
        length = t1 - t0
        lo = t0 + delta[0] * length
        hi = t1 + delta[1] * length
        lo_c = min(max(lo, 0.0), duration_s)
        hi_c = min(max(hi, 0.0), duration_s)
        clamp_mask = np.array([lo_c == lo, hi_c == hi], dtype=np.float64)
        cache = (c_mlp, c_tanh, length, clamp_mask)
        return (lo_c, hi_c), cache

    def measure_bwd(self, dinterval: np.ndarray, cache) -> np.ndarray:
        """dinterval (2,) -> gradient w.r.t. the cited unit's tokens (M, D)."""
        c_mlp, c_tanh, length, clamp_mask = cache
        ddelta = dinterval * clamp_mask * length
        draw = L.tanh_bwd(self.cfg.offset_range * ddelta[None, :], c_tanh)
        dfeats = self.measure_mlp.backward(draw, c_mlp)
        d = self.cfg.width
        m = self.cfg.num_tokens
        return dfeats[0, d : d + m * d].reshape(m, d)


def identify(grounder: SurrogateGrounder, pool: EvidencePool, query_embedding: np.ndarray) -> np.ndarray:
    probs, _, _ = grounder.identify_fwd(pool, query_embedding)
    return probs


def snap_interval(t0: float, t1: float, duration_s: float) -> Interval:
    """Round to the 0.1 s grid keeping 0 <= start < end <= duration."""
    limit = math.floor(duration_s * 10.0) / 10.0
    r0 = min(max(math.floor(t0 * 10.0 + 0.5) / 10.0, 0.0), limit)
    r1 = min(max(math.floor(t1 * 10.0 + 0.5) / 10.0, 0.0), limit)
    if r1 <= r0:
        r1 = math.floor((r0 + 0.1) * 10.0 + 0.5) / 10.0
    if r1 > limit:
        r1 = limit
        r0 = max(0.0, math.floor((limit - 0.1) * 10.0 + 0.5) / 10.0)
    return (r0, r1)


def measure(
    grounder: SurrogateGrounder, unit, query_embedding: np.ndarray, duration_s: float
) -> Interval:
    """Refined metric interval for the cited unit, on the 0.1 s grid."""
    (lo, hi), _ = grounder.measure_fwd(unit, query_embedding, duration_s)
    return snap_interval(lo, hi, duration_s)


# ---------------------------------------------------------------------------
# stage-3 losses


@dataclass
class Stage3Losses:
    total: float
    id_loss: float
    time_loss: float
    reg: float = 0.0
    fallback_citations: int = 0


def stage3_loss(
    grounder: SurrogateGrounder,
    pool: EvidencePool,
    query_embedding: np.ndarray,
    gt: Interval,
    alpha: float | None = None,
    beta: float | None = None,
):
    """Identify cross-entropy against the best-overlap target plus
    duration-normalized L1 of the teacher-forced measured interval.

    Returns (losses, backward closure); the closure pushes gradients into
    the evidence tokens and returns them per unit.
    """
    cfg = grounder.cfg
    alpha = cfg.alpha if alpha is None else alpha
    beta = cfg.beta if beta is None else beta
    z_star, fallback = assign_citation_target(pool, gt)
    probs, logits, c_id = grounder.identify_fwd(pool, query_embedding)
    id_loss = -math.log(max(probs[z_star - 1], 1e-300))
    unit = pool.units[z_star - 1]
    (lo, hi), c_meas = grounder.measure_fwd(unit, query_embedding, pool.duration_s)
    time_loss = (abs(lo - gt[0]) + abs(hi - gt[1])) / pool.duration_s
    total = alpha * id_loss + beta * time_loss
    losses = Stage3Losses(
        total=total, id_loss=id_loss, time_loss=time_loss,
        fallback_citations=int(fallback),
    )

    def backward(scale: float = 1.0) -> list[np.ndarray]:
        onehot = np.zeros(pool.k)
        onehot[z_star - 1] = 1.0
        dlogits = scale * alpha * (probs - onehot)
        dtokens = grounder.identify_bwd(dlogits, c_id)
        dinterval = scale * beta * np.array(
            [math.copysign(1.0, lo - gt[0]), math.copysign(1.0, hi - gt[1])]
        ) / pool.duration_s
        dtokens[z_star - 1] = dtokens[z_star - 1] + grounder.measure_bwd(dinterval, c_meas)
        return dtokens

    return losses, backward


def stage3_joint_step(
    encoder: TemporalEncoder,
    head: ProposalHead,
    see: SpanEvidenceEncoder,
    grounder: SurrogateGrounder,
    store: ParamStore,
    batch: list[tuple[VideoSample, np.ndarray, Interval, list[Interval]]],
    k: int,
    lr: float,
    perception_lr_mult: float = 0.1,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
) -> Stage3Losses:
    """Joint fine-tuning step: grounder + SEE at full LR, perception
    (encoder + proposal head) at a scaled LR, pools rebuilt per query from
    the current perception parameters.

    Batch rows: (video, query embedding, target interval, all normalized
    ground-truth intervals of the video for the stage-2 regression term).
    """
    cfg = grounder.cfg
    store.zero_grad()
    b = len(batch)
    agg = Stage3Losses(total=0.0, id_loss=0.0, time_loss=0.0, reg=0.0)
    for video, query_embedding, gt, video_gts_norm in batch:
        x = pool_spatial(video.features)
        n = x.shape[0]
        u, c_enc = encoder.forward(x, full_positions(n))
        spans, objs, c_head = head.forward(u)
        proposals = [
            Proposal(span=(float(s), float(e)), objectness=float(o), source_index=i)
            for i, ((s, e), o) in enumerate(zip(spans, objs))
        ]
        top = topk_select(proposals, k)
        du = np.zeros_like(u)
        units = []
        crops = []
        for rank, prop in enumerate(top, start=1):
            interval = to_metric_time(prop.span, video.duration_s)
            u_k, (row_lo, row_hi) = crop_segment(u, interval, video.fps)
            tokens, c_see = see.forward(u_k)
            units.append(ProxyUnit(span_id=rank, interval=interval, tokens=tokens))
            crops.append((c_see, row_lo, row_hi))
        pool = EvidencePool(units=units, video_id=video.id, k=k, duration_s=video.duration_s)
        losses, backward = stage3_loss(grounder, pool, query_embedding, gt)
        agg.id_loss += losses.id_loss / b
        agg.time_loss += losses.time_loss / b
        agg.fallback_citations += losses.fallback_citations
        dtokens = backward(scale=1.0 / b)
        for (c_see, row_lo, row_hi), dtok in zip(crops, dtokens):
            du[row_lo:row_hi] += see.backward(dtok, c_see)
        if cfg.gamma > 0.0:
            parts, c_loss = stage2_loss_fwd(spans, objs, video_gts_norm)
            agg.reg += parts.reg / b
            dspans, dobjs = stage2_loss_bwd(c_loss, reg_weight=cfg.gamma / b, score_weight=0.0)
            du += head.backward(dspans, dobjs, c_head)
        encoder.backward(du, c_enc)
    agg.total = cfg.alpha * agg.id_loss + cfg.beta * agg.time_loss + cfg.gamma * agg.reg
    if not math.isfinite(agg.total):
        raise NonFiniteError(f"stage-3 loss is not finite: {agg}")
    adamw_step(
        store,
        lr=lr,
        betas=betas,
        weight_decay=weight_decay,
        lr_scales={"encoder.": perception_lr_mult, "proposal.": perception_lr_mult},
    )
    return agg


@dataclass
class ProxyUnit:
    """EvidenceUnit-shaped record used while tokens still carry gradients."""

    span_id: int
    interval: Interval
    tokens: np.ndarray


# ---------------------------------------------------------------------------
# grounding


@dataclass
class GroundingOutput:
    cited_id: int
    interval: Interval
    answer: str
    identify_distribution: np.ndarray
    temperature: float
    response: str
    oracle: bool = False

    def validate(self, k: int) -> None:
        if not 1 <= self.cited_id <= k:
            raise InvalidSpanIdError(f"cited id {self.cited_id} outside 1..{k}")
        if not self.interval[0] < self.interval[1]:
            raise EvalError(f"degenerate interval {self.interval}")
        if abs(float(self.identify_distribution.sum()) - 1.0) > 1e-9:
            raise EvalError("identify distribution does not sum to 1")


def ground(
    grounder: SurrogateGrounder | None,
    pool: EvidencePool,
    query_embedding: np.ndarray | None,
    query_text: str,
    temperature: float = 0.0,
    rng: Rng | None = None,
    oracle_gt: Interval | None = None,
) -> GroundingOutput:
    """Cite one evidence unit, then produce the final interval and answer.

    Surrogate mode: temperature 0 takes the identify argmax (deterministic),
    temperature > 0 samples from the tempered distribution using ``rng``;
    the cited unit is then refined by the measure head. Oracle mode
    (``oracle_gt`` given, grounder None) cites the best-overlap unit for
    the supplied ground truth and returns its interval unrefined.
    """
    if not pool.units:
        raise EvalError("ground over empty pool")
    if oracle_gt is not None:
        z, _ = assign_citation_target(pool, oracle_gt)
        probs = np.zeros(pool.k)
        probs[z - 1] = 1.0
        interval = pool.units[z - 1].interval
        oracle = True
    else:
        if grounder is None or query_embedding is None:
            raise ConfigError("surrogate grounding needs a grounder and query embedding")
        probs, logits, _ = grounder.identify_fwd(pool, query_embedding)
        if temperature == 0.0:
            z = int(np.argmax(probs)) + 1
        else:
            if rng is None:
                raise ConfigError("temperature sampling needs an rng")
            tempered = L.softmax(logits / temperature)
            z = rng.categorical(tempered) + 1
        interval = measure(grounder, pool.units[z - 1], query_embedding, pool.duration_s)
        oracle = False
    answer = (
        f"You can see {query_text} from {format_seconds(interval[0])} seconds "
        f"to {format_seconds(interval[1])} seconds"
    )
    out = GroundingOutput(
        cited_id=z,
        interval=interval,
        answer=answer,
        identify_distribution=probs,
        temperature=temperature,
        response=render_response(answer, z),
        oracle=oracle,
    )
    out.validate(pool.k)
    return out
