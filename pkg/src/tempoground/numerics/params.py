"""Named parameters, gradient accumulators, AdamW, and the LR schedule."""

from __future__ import annotations

import math

import numpy as np

from tempoground.errors import ConfigError, DimensionError, NonFiniteError


class Parameter:
    """A named float64 tensor with a same-shape gradient accumulator."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class ParamStore:
    """Single-writer registry of parameters plus AdamW moment state.

    Every parameter owns a gradient accumulator and a first/second moment
    pair of the same shape; the step counter only ever increases.
    """

    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigError(f"parameter {name!r} already registered")
        p = Parameter(name, data)
        self.params[name] = p
        self.m[name] = np.zeros_like(p.data)
        self.v[name] = np.zeros_like(p.data)
        return p

    def get(self, name: str) -> Parameter:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params.keys())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                if strict:
                    raise CheckpointKeyError(name)
                continue
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise DimensionError(
                    f"checkpoint tensor {name!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arr)
            p.grad = np.zeros_like(p.data)
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)


class CheckpointKeyError(ConfigError):
    def __init__(self, name: str):
        super().__init__(f"checkpoint is missing parameter {name!r}")


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    lr_scales: dict[str, float] | None = None,
) -> None:
    """One decoupled-weight-decay Adam update over every parameter.

    ``lr_scales`` maps name prefixes to per-group learning-rate
    multipliers (longest matching prefix wins; default 1.0). A multiplier
    of exactly 0 freezes the group bit-exactly, moments included.
    """
    beta1, beta2 = betas
    store.step_count += 1
    t = store.step_count
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        scale = _lr_scale(name, lr_scales)
        if scale == 0.0:
            continue
        step_lr = lr * scale
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay != 0.0:
            p.data *= 1.0 - step_lr * weight_decay
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= step_lr * m_hat / (np.sqrt(v_hat) + eps)


def _lr_scale(name: str, lr_scales: dict[str, float] | None) -> float:
    if not lr_scales:
        return 1.0
    best_len = -1
    best = 1.0
    for prefix, scale in lr_scales.items():
        if name.startswith(prefix) and len(prefix) > best_len:
            best_len = len(prefix)
            best = scale
    return best


def cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to zero."""
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = warmup_frac * total_steps
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
