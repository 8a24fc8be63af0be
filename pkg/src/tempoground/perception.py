"""Stage-1 predictive temporal perception.

A shared temporal encoder maps every view of a feature sequence to
latents; a lightweight predictor maps each local-view latent (plus a
learnable view-type embedding) to the stop-gradient global latent. The
predictive loss is regularized by a sliced isotropic Gaussian statistic
over pooled latents, and the two are mixed by a weight lam in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from tempoground.errors import ConfigError, DimensionError, NonFiniteError, SamplingError
from tempoground.numerics import layers as L
from tempoground.numerics.params import ParamStore, adamw_step
from tempoground.numerics.rng import Rng

GLOBAL_VIEW_TYPE = -1

# positional encodings use normalized time idx/N scaled by this factor, so
# every video shares one coordinate system regardless of its length and
# span targets in [0, 1] are directly decodable from the encoding
POSITION_SCALE = 128.0


def normalized_positions(indices: np.ndarray, total_len: int) -> np.ndarray:
    return np.asarray(indices, dtype=np.float64) / total_len * POSITION_SCALE


def full_positions(total_len: int) -> np.ndarray:
    return normalized_positions(np.arange(total_len), total_len)


# ---------------------------------------------------------------------------
# configs and view specs


@dataclass
class TemporalModuleConfig:
    width: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    predictor_depth: int = 1
    predictor_width: int = 32
    num_view_types: int = 2
    lam: float = 0.1
    sigreg_directions: int = 64
    sigreg_divergence: str = "epps_pulley"

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must be in [0, 1], got {self.lam}")
        if self.sigreg_directions < 1:
            raise ConfigError("sigreg_directions must be >= 1")
        if self.sigreg_divergence not in DIVERGENCES:
            raise ConfigError(f"unknown sigreg divergence {self.sigreg_divergence!r}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class ViewPolicy:
    """How views are cropped/strided out of an N-step sequence."""

    locals_per_step: int = 4
    ratio_range: tuple[float, float] = (0.15, 0.5)
    strides: tuple[int, ...] = (1, 2)  # one view type per stride pattern
    global_len: int | None = None  # None: global view keeps all N steps

    @property
    def num_view_types(self) -> int:
        return len(self.strides)


@dataclass
class ViewSpec:
    kind: str  # "global" | "local"
    start_index: int
    length: int
    stride: int
    view_type_id: int

    def indices(self) -> np.ndarray:
        return self.start_index + self.stride * np.arange(self.length)

    @property
    def span(self) -> int:
        return (self.length - 1) * self.stride + 1

    def validate(self, n: int) -> None:
        if self.start_index < 0 or self.length < 1 or self.stride < 1:
            raise SamplingError(f"bad view spec {self}")
        if self.start_index + (self.length - 1) * self.stride >= n:
            raise SamplingError(f"view {self} exceeds sequence length {n}")


def sample_views(x: np.ndarray, rng: Rng, policy: ViewPolicy) -> tuple[ViewSpec, list[ViewSpec]]:
    """One full-range global view plus policy.locals_per_step local views.

    A local view's coverage ratio span/N is guaranteed to lie inside
    policy.ratio_range; the view type id indexes the stride pattern.
    """
    n = x.shape[0]
    if policy.global_len is None or policy.global_len >= n:
        global_view = ViewSpec("global", 0, n, 1, GLOBAL_VIEW_TYPE)
    else:
        stride = n // policy.global_len
        global_view = ViewSpec("global", 0, policy.global_len, stride, GLOBAL_VIEW_TYPE)
    global_view.validate(n)

    min_span = math.ceil(policy.ratio_range[0] * n)
    max_span = min(int(policy.ratio_range[1] * n), n)
    usable: list[tuple[int, int, int]] = []  # (type_id, l_min, l_max)
    for type_id, stride in enumerate(policy.strides):
        l_min = max(2, math.ceil((min_span - 1) / stride) + 1)
        l_max = (max_span - 1) // stride + 1
        if l_max >= l_min:
            usable.append((type_id, l_min, l_max))
    if not usable:
        raise SamplingError(
            f"sequence of {n} steps too short for local views with "
            f"ratios {policy.ratio_range} and strides {policy.strides}"
        )
    locals_: list[ViewSpec] = []
    for _ in range(policy.locals_per_step):
        type_id, l_min, l_max = usable[int(rng.integers(0, len(usable)))]
        stride = policy.strides[type_id]
        length = int(rng.integers(l_min, l_max + 1))
        span = (length - 1) * stride + 1
        start = int(rng.integers(0, n - span + 1))
        view = ViewSpec("local", start, length, stride, type_id)
        view.validate(n)
        locals_.append(view)
    return global_view, locals_


# ---------------------------------------------------------------------------
# temporal encoder f and predictor g


class TemporalEncoder:
    """Shared pre-norm self-attention stack over (view length, D) rows."""

    def __init__(self, store: ParamStore, prefix: str, cfg: TemporalModuleConfig, rng: Rng):
        self.width = cfg.width
        self.blocks = [
            L.SelfAttentionBlock(store, f"{prefix}.block{i}", cfg.width, cfg.heads, cfg.mlp_ratio, rng.child(f"b{i}"))
            for i in range(cfg.depth)
        ]
        self.ln_out = L.LayerNorm(store, f"{prefix}.ln_out", cfg.width)

    def forward(self, rows: np.ndarray, positions: np.ndarray):
        if rows.shape[-1] != self.width:
            raise DimensionError(f"encoder width {self.width} != input {rows.shape[-1]}")
        h = rows + L.sinusoid_positions(positions, self.width)
        caches = []
        for block in self.blocks:
            h, c = block.forward(h)
            caches.append(c)
        u, c_ln = self.ln_out.forward(h)
        return u, (caches, c_ln)

    def backward(self, du: np.ndarray, cache) -> np.ndarray:
        caches, c_ln = cache
        dh = self.ln_out.backward(du, c_ln)
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            dh = block.backward(dh, c)
        return dh


def encode(encoder: TemporalEncoder, view: ViewSpec, x: np.ndarray):
    """Encode one view; positions are normalized to the full sequence."""
    view.validate(x.shape[0])
    idx = view.indices()
    return encoder.forward(x[idx], normalized_positions(idx, x.shape[0]))


def encode_full(encoder: TemporalEncoder, x: np.ndarray) -> np.ndarray:
    """Full-sequence latents (N, D) under frozen parameters."""
    view = ViewSpec("global", 0, x.shape[0], 1, GLOBAL_VIEW_TYPE)
    u, _ = encode(encoder, view, x)
    return u


class Predictor:
    """Maps a local-view latent plus its view embedding to the global latent."""

    def __init__(self, store: ParamStore, prefix: str, cfg: TemporalModuleConfig, rng: Rng):
        self.cfg = cfg
        self.e_v = store.add(
            f"{prefix}.view_embed", rng.child("ev").normal((cfg.num_view_types, cfg.width), scale=0.02)
        )
        self.in_proj = L.Linear(store, f"{prefix}.in_proj", cfg.width, cfg.predictor_width, rng.child("in"))
        self.blocks = [
            L.SelfAttentionBlock(
                store, f"{prefix}.block{i}", cfg.predictor_width, self._pred_heads(), cfg.mlp_ratio, rng.child(f"b{i}")
            )
            for i in range(cfg.predictor_depth)
        ]
        self.out_proj = L.Linear(store, f"{prefix}.out_proj", cfg.predictor_width, cfg.width, rng.child("out"))

    def _pred_heads(self) -> int:
        heads = min(self.cfg.heads, self.cfg.predictor_width)
        while self.cfg.predictor_width % heads != 0:
            heads -= 1
        return heads

    def forward(self, u_local: np.ndarray, view_type_id: int, target_len: int):
        if not 0 <= view_type_id < self.cfg.num_view_types:
            raise ConfigError(f"unknown view type {view_type_id}")
        h = u_local + self.e_v.data[view_type_id]
        h, c_in = self.in_proj.forward(h)
        caches = []
        for block in self.blocks:
            h, c = block.forward(h)
            caches.append(c)
        h, c_out = self.out_proj.forward(h)
        pred, c_rs = L.time_resample_fwd(h, target_len)
        return pred, (view_type_id, c_in, caches, c_out, c_rs)

    def backward(self, dpred: np.ndarray, cache) -> np.ndarray:
        view_type_id, c_in, caches, c_out, c_rs = cache
        dh = L.time_resample_bwd(dpred, c_rs)
        dh = self.out_proj.backward(dh, c_out)
        for block, c in zip(reversed(self.blocks), reversed(caches)):
            dh = block.backward(dh, c)
        du = self.in_proj.backward(dh, c_in)
        self.e_v.grad[view_type_id] += du.sum(axis=0)
        return du


def predict_global(predictor: Predictor, u_local: np.ndarray, view_type_id: int, target_len: int):
    return predictor.forward(u_local, view_type_id, target_len)


# ---------------------------------------------------------------------------
# losses


def loss_pred(target: np.ndarray, preds: list[np.ndarray]):
    """Sum over views of mean-square error against the stop-gradient target.

    The target enters as a plain array: no gradient ever flows into the
    branch that produced it. Returns (loss, per-view gradients).
    """
    loss = 0.0
    grads = []
    for pred in preds:
        if pred.shape != target.shape:
            raise DimensionError(f"pred shape {pred.shape} != target {target.shape}")
        diff = pred - target
        loss += float((diff * diff).mean())
        grads.append(2.0 * diff / diff.size)
    return loss, grads


@lru_cache(maxsize=4)
def _hermite_nodes(q: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for E_{t~N(0,1)}[g(t)] = sum w_i g(t_i)."""
    nodes, weights = np.polynomial.hermite.hermgauss(q)
    return nodes * math.sqrt(2.0), weights / math.sqrt(math.pi)


def sample_directions(rng: Rng, m: int, dim: int) -> np.ndarray:
    """m unit vectors drawn uniformly on the (dim-1)-sphere."""
    a = rng.normal((m, dim))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def sigreg_fwd(samples: np.ndarray, directions: np.ndarray, quad_points: int = 33):
    """Sliced goodness-of-fit statistic of samples against N(0, 1).

    For each direction the 1D projections' empirical characteristic
    function is compared against the standard normal's on a Gauss-Hermite
    grid (the Epps-Pulley weighted L2 statistic); the mean over directions
    is returned. Differentiable with respect to the samples. The default
    grid resolves projections up to roughly +/-8; latents behind the
    encoder's final layernorm stay well inside that range.
    """
    n = samples.shape[0]
    if n < 8:
        raise DimensionError(f"sigreg needs >= 8 samples, got {n}")
    t, w = _hermite_nodes(quad_points)
    proj = samples @ directions.T  # (n, m)
    m = proj.shape[1]
    c_emp = np.empty((quad_points, m))
    s_emp = np.empty((quad_points, m))
    trig = []
    for q in range(quad_points):
        ang = t[q] * proj
        cos_q = np.cos(ang)
        sin_q = np.sin(ang)
        c_emp[q] = cos_q.mean(axis=0)
        s_emp[q] = sin_q.mean(axis=0)
        trig.append((cos_q, sin_q))
    c_tgt = np.exp(-0.5 * t * t)[:, None]
    stat = float((w[:, None] * ((c_emp - c_tgt) ** 2 + s_emp**2)).sum(axis=0).mean())
    cache = (directions, t, w, proj.shape, trig, c_emp, s_emp, c_tgt)
    return stat, cache


def sigreg_bwd(cache) -> np.ndarray:
    directions, t, w, proj_shape, trig, c_emp, s_emp, c_tgt = cache
    n, m = proj_shape
    dc = 2.0 * w[:, None] * (c_emp - c_tgt) / m  # (Q, m)
    ds = 2.0 * w[:, None] * s_emp / m
    dproj = np.zeros(proj_shape)
    for q, (cos_q, sin_q) in enumerate(trig):
        dproj += t[q] * (ds[q] * cos_q - dc[q] * sin_q)
    dproj /= n
    return dproj @ directions


def sigreg(samples: np.ndarray, m: int, rng: Rng, divergence: str = "epps_pulley") -> float:
    """Forward-only statistic with freshly drawn directions."""
    fwd = DIVERGENCES[divergence]
    directions = sample_directions(rng, m, samples.shape[1])
    stat, _ = fwd(samples, directions)
    return stat


DIVERGENCES = {"epps_pulley": sigreg_fwd}


# ---------------------------------------------------------------------------
# stage-1 training step


@dataclass
class Stage1Losses:
    loss_pred: float
    loss_sig: float
    total: float
    lr: float


class PerceptionModel:
    def __init__(self, store: ParamStore, cfg: TemporalModuleConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        self.encoder = TemporalEncoder(store, "encoder", cfg, rng.child("encoder"))
        self.predictor = Predictor(store, "predictor", cfg, rng.child("predictor"))


def stage1_step(
    model: PerceptionModel,
    store: ParamStore,
    batch: list[np.ndarray],
    policy: ViewPolicy,
    rng: Rng,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
) -> Stage1Losses:
    """One optimizer step of the multi-view latent-prediction objective.

    Per sample: sample views, encode with the shared encoder, predict the
    stop-gradient global latent from each local latent, pool latent rows
    from {sg(U_g)} and all local latents across the minibatch for the
    sliced regularizer, combine as (1-lam)*pred + lam*sig, and apply one
    AdamW update.
    """
    cfg = model.cfg
    lam = cfg.lam
    store.zero_grad()
    b = len(batch)
    total_pred = 0.0
    pooled_rows: list[np.ndarray] = []
    # (cache_encoder, slice into pooled rows, pred grads to push back later)
    local_records: list[tuple] = []
    row_cursor = 0

    for i, x in enumerate(batch):
        sample_rng = rng.child(f"sample/{i}")
        global_view, local_views = sample_views(x, sample_rng, policy)
        u_g, _ = encode(model.encoder, global_view, x)
        target = u_g  # stop-gradient: used as a constant from here on
        pooled_rows.append(target)
        row_cursor += target.shape[0]

        preds = []
        sample_locals = []
        for view in local_views:
            u_l, c_enc = encode(model.encoder, view, x)
            pred, c_pred = model.predictor.forward(u_l, view.view_type_id, target.shape[0])
            preds.append(pred)
            pooled_rows.append(u_l)
            sl = slice(row_cursor, row_cursor + u_l.shape[0])
            row_cursor += u_l.shape[0]
            sample_locals.append((c_enc, c_pred, sl))
        l_pred, dpreds = loss_pred(target, preds)
        total_pred += l_pred
        for (c_enc, c_pred, sl), dpred in zip(sample_locals, dpreds):
            local_records.append((c_enc, c_pred, sl, dpred))

    mean_pred = total_pred / b
    pooled = np.concatenate(pooled_rows, axis=0)
    directions = sample_directions(rng.child("directions"), cfg.sigreg_directions, cfg.width)
    sig_fwd = DIVERGENCES[cfg.sigreg_divergence]
    l_sig, c_sig = sig_fwd(pooled, directions)
    total = (1.0 - lam) * mean_pred + lam * l_sig
    if not math.isfinite(total):
        raise NonFiniteError(
            f"stage-1 loss is not finite (pred={mean_pred}, sig={l_sig})"
        )
    dpooled = lam * sigreg_bwd(c_sig) if lam > 0.0 else np.zeros_like(pooled)

    for c_enc, c_pred, sl, dpred in local_records:
        du_l = np.zeros((sl.stop - sl.start, cfg.width))
        if lam < 1.0:
            du_l += model.predictor.backward((1.0 - lam) * dpred / b, c_pred)
        du_l += dpooled[sl]
        model.encoder.backward(du_l, c_enc)

    adamw_step(store, lr=lr, betas=betas, weight_decay=weight_decay)
    return Stage1Losses(loss_pred=mean_pred, loss_sig=l_sig, total=total, lr=lr)


def pooled_latent_variance(encoder: TemporalEncoder, sequences: list[np.ndarray]) -> np.ndarray:
    """Per-dimension variance of full-sequence latents pooled over inputs."""
    rows = np.concatenate([encode_full(encoder, x) for x in sequences], axis=0)
    return rows.var(axis=0)
