"""Flat dotted-key run configuration.

Precedence: command-line overrides > config file > defaults. Unknown keys
are rejected; every key has a documented default; the fully resolved
config is echoed into the run directory so a run can be reproduced
bit-exactly from its echo.
"""

from __future__ import annotations

from pathlib import Path

from tempoground.errors import ConfigError

# key -> (default, help)
DEFAULTS: dict[str, tuple[object, str]] = {
    "run.dir": ("runs/default", "run directory receiving all artifacts"),
    "run.seed": (7, "master seed for every stage"),
    # synthetic data
    "data.num_train_videos": (100, "training videos to generate"),
    "data.num_eval_videos": (200, "held-out evaluation videos"),
    "data.fps": (1.0, "timesteps per second"),
    "data.width": (32, "feature and model width D"),
    "data.spatial_tokens": (2, "spatial tokens per timestep S"),
    "data.num_archetypes": (6, "distinct event archetypes A"),
    "data.min_duration_s": (60.0, "shortest video"),
    "data.max_duration_s": (120.0, "longest video"),
    "data.min_events": (2, "fewest events per video"),
    "data.max_events": (5, "most events per video"),
    "data.min_event_s": (6.0, "shortest event"),
    "data.max_event_s": (25.0, "longest event"),
    "data.min_gap_s": (2.0, "shortest background gap"),
    "data.max_gap_s": (12.0, "longest background gap"),
    "data.noise_level": (0.5, "feature noise scale"),
    "data.query_noise": (0.1, "query embedding noise scale"),
    # temporal module and heads
    "model.depth": (2, "temporal encoder blocks"),
    "model.heads": (4, "attention heads"),
    "model.mlp_ratio": (2.0, "feed-forward expansion"),
    "model.predictor_depth": (1, "predictor blocks"),
    "model.predictor_width": (32, "predictor width"),
    "model.proposal_depth": (2, "proposal head blocks"),
    "model.see_depth": (2, "evidence encoder cross-attention layers"),
    "model.k": (8, "evidence pool size K"),
    "model.m": (4, "evidence tokens per unit M"),
    "model.grounder_hidden": (64, "identify/measure hidden width"),
    "model.interval_freqs": (4, "interval encoding frequencies"),
    "model.offset_range": (0.5, "measure head squashing range r"),
    # stage-1 predictive pretraining
    "stage1.steps": (400, "optimizer steps"),
    "stage1.batch_size": (4, "videos per step"),
    "stage1.peak_lr": (1e-3, "peak learning rate"),
    "stage1.warmup_frac": (0.05, "warmup fraction of total steps"),
    "stage1.weight_decay": (0.01, "decoupled weight decay"),
    "stage1.lam": (0.1, "regularizer weight lambda"),
    "stage1.locals_per_step": (4, "local views per sample"),
    "stage1.ratio_min": (0.15, "min local coverage ratio"),
    "stage1.ratio_max": (0.5, "max local coverage ratio"),
    "stage1.strides": ("1,2", "local view stride patterns"),
    "stage1.sigreg_directions": (64, "sliced-statistic directions"),
    "stage1.global_len": (0, "global view length (0 = full sequence)"),
    # stage-2 proposal warm-up
    "stage2.steps": (500, "optimizer steps"),
    "stage2.batch_size": (4, "videos per step"),
    "stage2.peak_lr": (1e-3, "peak learning rate"),
    "stage2.warmup_frac": (0.05, "warmup fraction"),
    "stage2.weight_decay": (0.01, "decoupled weight decay"),
    "stage2.score_weight": (1.0, "objectness loss weight eta"),
    "stage2.central_frac": (0.5, "positive-center fraction of an event"),
    "stage2.init": ("stage1", "encoder init: stage1 | random"),
    "stage2.train_encoder": (True, "also train the temporal encoder"),
    # stage-3 identify-then-measure
    "stage3.steps": (600, "optimizer steps"),
    "stage3.batch_size": (4, "queries per step"),
    "stage3.peak_lr": (1e-3, "peak learning rate"),
    "stage3.warmup_frac": (0.05, "warmup fraction"),
    "stage3.weight_decay": (0.01, "decoupled weight decay"),
    "stage3.alpha": (1.0, "identify loss weight"),
    "stage3.beta": (1.0, "measure loss weight"),
    "stage3.gamma": (0.1, "stage-2 regression term weight"),
    "stage3.perception_lr_mult": (0.1, "encoder/proposal LR multiplier"),
    # grounding and evaluation
    "ground.split": ("eval", "dataset split to ground: eval | train"),
    "ground.grounder": ("surrogate", "surrogate | oracle"),
    "ground.temperature": (0.0, "identify decode temperature"),
    "ground.repeats": (1, "independent decodes per query"),
    "ground.emit_prompts": (False, "also write rendered instructions"),
    "report.drop_first_gap_bin": (False, "omit [0,0.02) bin and renormalize density"),
    "report.figures": (True, "render PNG figures alongside CSV output"),
    "diagnose.num_pca_videos": (4, "videos projected for latent-geometry output"),
}


class RunConfig:
    def __init__(self, values: dict[str, object]):
        self._values = values

    def __getitem__(self, key: str):
        return self._values[key]

    def items(self) -> list[tuple[str, object]]:
        return sorted(self._values.items())

    @property
    def run_dir(self) -> Path:
        return Path(str(self["run.dir"]))

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def echo(self) -> str:
        lines = [f"{key} = {_render_value(value)}" for key, value in self.items()]
        return "\n".join(lines) + "\n"

    def write_echo(self) -> Path:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "config.echo"
        path.write_text(self.echo())
        return path

    def strides(self) -> tuple[int, ...]:
        raw = str(self["stage1.strides"])
        try:
            return tuple(int(s) for s in raw.split(",") if s)
        except ValueError as exc:
            raise ConfigError(f"stage1.strides must be comma-separated ints, got {raw!r}") from exc


def _render_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str) -> object:
    default = DEFAULTS[key][0]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_file(path: str | Path) -> dict[str, str]:
    """`key = value` lines; '#' starts a comment."""
    entries: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def resolve_config(
    config_file: str | None = None, overrides: list[str] | None = None
) -> RunConfig:
    """Merge defaults, an optional config file, and --key=value overrides."""
    values = {key: default for key, (default, _) in DEFAULTS.items()}
    layers: list[dict[str, str]] = []
    if config_file:
        layers.append(parse_config_file(config_file))
    if overrides:
        parsed: dict[str, str] = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, value = item.split("=", 1)
            parsed[key.strip()] = value.strip()
        layers.append(parsed)
    for layer in layers:
        for key, raw in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    _validate(values)
    return RunConfig(values)


def _validate(values: dict[str, object]) -> None:
    if values["data.min_duration_s"] > values["data.max_duration_s"]:
        raise ConfigError("data.min_duration_s exceeds data.max_duration_s")
    if values["data.min_events"] > values["data.max_events"]:
        raise ConfigError("data.min_events exceeds data.max_events")
    if not 0.0 <= float(values["stage1.lam"]) <= 1.0:
        raise ConfigError("stage1.lam must lie in [0, 1]")
    if values["stage2.init"] not in ("stage1", "random"):
        raise ConfigError("stage2.init must be 'stage1' or 'random'")
    if values["ground.grounder"] not in ("surrogate", "oracle"):
        raise ConfigError("ground.grounder must be 'surrogate' or 'oracle'")
    if values["ground.split"] not in ("eval", "train"):
        raise ConfigError("ground.split must be 'eval' or 'train'")
    if int(values["ground.repeats"]) < 1:
        raise ConfigError("ground.repeats must be >= 1")
    if int(values["model.k"]) < 1 or int(values["model.m"]) < 1:
        raise ConfigError("model.k and model.m must be >= 1")
