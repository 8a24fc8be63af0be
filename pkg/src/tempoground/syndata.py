"""Synthetic corpora: feature sequences with planted event structure.

Each "video" is a feature sequence of shape (N, S, D) built from
per-archetype latent trajectories (random low-dimensional sinusoid
mixtures projected to D) plus Gaussian noise. Inter-event gaps carry a
dedicated background archetype, so every timestep has a well-defined
inside/outside label. Each query targets exactly one planted event and
carries a noisy copy of the event archetype's descriptor vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tempoground.errors import DatasetParseError, DimensionError, GenerationError
from tempoground.numerics.checkpoint import read_tensors, write_tensors
from tempoground.numerics.rng import Rng

BACKGROUND_ID = 0

_NAME_ADJECTIVES = [
    "amber", "drifting", "spinning", "flickering", "rolling", "pulsing",
    "woven", "cascading", "folded", "gliding", "scattered", "rippling",
]
_NAME_NOUNS = [
    "lattice", "cascade", "orbit", "ribbon", "mosaic", "swell",
    "carousel", "filament", "meander", "chevron", "plume", "braid",
]


def archetype_name(archetype_id: int) -> str:
    if archetype_id == BACKGROUND_ID:
        return "background"
    i = archetype_id - 1
    adj = _NAME_ADJECTIVES[i % len(_NAME_ADJECTIVES)]
    noun = _NAME_NOUNS[(i // len(_NAME_ADJECTIVES) + i) % len(_NAME_NOUNS)]
    return f"{adj} {noun}"


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Event:
    start_s: float
    end_s: float
    archetype_id: int


@dataclass
class EventScript:
    duration_s: float
    events: list[Event]

    def validate(self, max_events: int | None = None) -> None:
        if not self.events:
            raise GenerationError("script has no events")
        if max_events is not None and len(self.events) > max_events:
            raise GenerationError(f"script has {len(self.events)} events > max {max_events}")
        prev_end = 0.0
        for ev in self.events:
            if not 0.0 <= ev.start_s < ev.end_s <= self.duration_s:
                raise GenerationError(
                    f"event ({ev.start_s}, {ev.end_s}) outside [0, {self.duration_s}]"
                )
            if ev.start_s < prev_end:
                raise GenerationError("events overlap or are unsorted")
            prev_end = ev.end_s

    def archetype_at(self, t: float) -> int:
        for ev in self.events:
            if ev.start_s <= t < ev.end_s:
                return ev.archetype_id
        return BACKGROUND_ID


@dataclass
class VideoSample:
    id: str
    script: EventScript
    features: np.ndarray  # (N, S, D)
    fps: float
    seed: int

    @property
    def num_timesteps(self) -> int:
        return self.features.shape[0]

    @property
    def duration_s(self) -> float:
        return self.script.duration_s


@dataclass
class QuerySample:
    id: str
    video_id: str
    target_interval: tuple[float, float]
    text: str
    query_embedding: np.ndarray | None = None


@dataclass
class CorpusConfig:
    num_videos: int = 100
    fps: float = 1.0
    width: int = 32
    spatial_tokens: int = 2
    num_archetypes: int = 6
    duration_range: tuple[float, float] = (60.0, 120.0)
    events_range: tuple[int, int] = (2, 5)
    min_event_s: float = 6.0
    max_event_s: float = 25.0
    min_gap_s: float = 2.0
    max_gap_s: float = 12.0
    noise_level: float = 0.5
    query_noise: float = 0.1
    trajectory_rank: int = 3
    offset_scale: float = 0.6
    freq_range: tuple[float, float] = (0.25, 1.25)

    def validate(self) -> None:
        if self.fps <= 0 or self.width < 1 or self.spatial_tokens < 1:
            raise GenerationError("fps, width, and spatial_tokens must be positive")
        if self.events_range[0] < 1 or self.events_range[0] > self.events_range[1]:
            raise GenerationError(f"bad events_range {self.events_range}")
        if self.num_archetypes < self.events_range[1]:
            raise GenerationError(
                "num_archetypes must be >= max events (archetypes are unique per video)"
            )
        needed = (
            self.events_range[0] * self.min_event_s
            + (self.events_range[0] + 1) * self.min_gap_s
        )
        if needed > self.duration_range[0]:
            raise GenerationError(
                f"infeasible packing: {self.events_range[0]} events need {needed:.1f}s "
                f"but shortest video is {self.duration_range[0]:.1f}s"
            )


# ---------------------------------------------------------------------------
# archetype trajectories


class _Archetype:
    """Sinusoid mixture in a low-dimensional latent, projected to width D."""

    def __init__(self, rng: Rng, cfg: CorpusConfig):
        r = cfg.trajectory_rank
        self.freqs = rng.uniform((r,), *cfg.freq_range)
        self.phases = rng.uniform((r,), 0.0, 2.0 * math.pi)
        self.amps = rng.uniform((r,), 0.6, 1.4)
        self.proj = rng.normal((r, cfg.width)) / math.sqrt(r)
        self.offset = rng.normal((cfg.width,), scale=cfg.offset_scale)
        self.descriptor = rng.normal((cfg.width,))

    def value(self, t: np.ndarray) -> np.ndarray:
        """Trajectory at times t (seconds); returns (len(t), D)."""
        z = self.amps * np.sin(np.outer(t, self.freqs) + self.phases)
        return z @ self.proj + self.offset


class ArchetypeBank:
    def __init__(self, rng: Rng, cfg: CorpusConfig):
        # index 0 is the background archetype
        self.archetypes = [
            _Archetype(rng.child(f"archetype/{a}"), cfg)
            for a in range(cfg.num_archetypes + 1)
        ]

    def __getitem__(self, archetype_id: int) -> _Archetype:
        return self.archetypes[archetype_id]


# ---------------------------------------------------------------------------
# generation


def _sample_script(rng: Rng, cfg: CorpusConfig) -> EventScript:
    duration = float(rng.uniform((), *cfg.duration_range))
    slot = cfg.min_event_s + cfg.min_gap_s
    n_max = int((duration - cfg.min_gap_s) // slot)
    n_max = min(n_max, cfg.events_range[1])
    if n_max < cfg.events_range[0]:
        raise GenerationError(
            f"infeasible packing: duration {duration:.1f}s cannot hold "
            f"{cfg.events_range[0]} events"
        )
    n = int(rng.integers(cfg.events_range[0], n_max + 1))
    for _ in range(64):
        lengths = rng.uniform((n,), cfg.min_event_s, cfg.max_event_s)
        gaps = rng.uniform((n + 1,), cfg.min_gap_s, cfg.max_gap_s)
        if lengths.sum() + gaps.sum() <= duration:
            break
    else:
        lengths = np.full(n, cfg.min_event_s)
        gaps = np.full(n + 1, cfg.min_gap_s)
    archetype_ids = 1 + rng.choice(cfg.num_archetypes, size=n, replace=False)
    events = []
    cursor = float(gaps[0])
    for i in range(n):
        start = cursor
        end = start + float(lengths[i])
        events.append(Event(round(start, 2), round(end, 2), int(archetype_ids[i])))
        cursor = end + float(gaps[i + 1])
    script = EventScript(duration_s=round(duration, 2), events=events)
    script.validate(cfg.events_range[1])
    return script


def _render_features(rng: Rng, cfg: CorpusConfig, script: EventScript, bank: ArchetypeBank) -> np.ndarray:
    n = math.ceil(script.duration_s * cfg.fps)
    centers = (np.arange(n) + 0.5) / cfg.fps
    base = np.zeros((n, cfg.width))
    # background uses absolute time so all gaps share one trajectory
    background = bank[BACKGROUND_ID].value(centers)
    inside = np.zeros(n, dtype=bool)
    for ev in script.events:
        mask = (centers >= ev.start_s) & (centers < ev.end_s)
        if not mask.any():
            continue
        local_t = centers[mask] - ev.start_s
        base[mask] = bank[ev.archetype_id].value(local_t)
        inside |= mask
    base[~inside] = background[~inside]
    feats = np.repeat(base[:, None, :], cfg.spatial_tokens, axis=1)
    if cfg.noise_level > 0:
        feats = feats + cfg.noise_level * rng.normal(feats.shape)
    return feats


def generate_corpus(
    cfg: CorpusConfig, seed: int, id_prefix: str = "synth", start_index: int = 0
) -> list[tuple[VideoSample, list[QuerySample]]]:
    """Deterministically generate `cfg.num_videos` videos with queries.

    ``start_index`` offsets the per-video random streams so that disjoint
    splits (train/eval) can share one seed, and with it one archetype
    bank, without repeating videos.
    """
    cfg.validate()
    root = Rng(seed)
    bank = ArchetypeBank(root.child("bank"), cfg)
    corpus = []
    for i in range(cfg.num_videos):
        vid_rng = root.child(f"video/{start_index + i}")
        script = _sample_script(vid_rng.child("script"), cfg)
        features = _render_features(vid_rng.child("features"), cfg, script, bank)
        video_id = f"{id_prefix}{i:05d}"
        video = VideoSample(
            id=video_id,
            script=script,
            features=features,
            fps=cfg.fps,
            seed=seed,
        )
        queries = []
        q_rng = vid_rng.child("queries")
        for j, ev in enumerate(script.events):
            desc = bank[ev.archetype_id].descriptor
            emb = desc + cfg.query_noise * q_rng.normal((cfg.width,))
            queries.append(
                QuerySample(
                    id=f"{video_id}_q{j + 1}",
                    video_id=video_id,
                    target_interval=(ev.start_s, ev.end_s),
                    text=archetype_name(ev.archetype_id),
                    query_embedding=emb,
                )
            )
        corpus.append((video, queries))
    return corpus


def pool_spatial(h: np.ndarray) -> np.ndarray:
    """Mean over the spatial-token axis: (N, S, D) -> (N, D)."""
    if h.ndim != 3:
        raise DimensionError(f"pool_spatial expects (N, S, D), got shape {h.shape}")
    return h.mean(axis=1)


def inside_labels(video: VideoSample) -> np.ndarray:
    """Per-timestep bool: timestep center lies inside a planted event."""
    centers = (np.arange(video.num_timesteps) + 0.5) / video.fps
    out = np.zeros(video.num_timesteps, dtype=bool)
    for ev in video.script.events:
        out |= (centers >= ev.start_s) & (centers < ev.end_s)
    return out


def boundary_contrast(video: VideoSample) -> tuple[float, float]:
    """(cross-boundary, within-segment) mean adjacent-step feature distance."""
    x = pool_spatial(video.features)
    centers = (np.arange(video.num_timesteps) + 0.5) / video.fps
    arch = np.array([video.script.archetype_at(t) for t in centers])
    dist = np.linalg.norm(np.diff(x, axis=0), axis=1)
    crossing = arch[1:] != arch[:-1]
    if not crossing.any() or crossing.all():
        raise GenerationError("video has no boundary/within pairs to contrast")
    return float(dist[crossing].mean()), float(dist[~crossing].mean())


# ---------------------------------------------------------------------------
# dataset files

_EVAL_KEYS = ("id", "video", "start_time", "end_time", "query", "duration")


def parse_eval_record(obj: dict, line_number: int | None = None) -> QuerySample:
    """Parse one evaluation-shape record into a QuerySample."""
    for key in _EVAL_KEYS:
        if key not in obj:
            raise DatasetParseError(f"missing field {key!r}", line_number)
    start = float(obj["start_time"])
    end = float(obj["end_time"])
    duration = float(obj["duration"])
    if not 0.0 <= start < end:
        raise DatasetParseError(f"bad interval ({start}, {end})", line_number)
    if end > duration:
        raise DatasetParseError(
            f"end_time {end} exceeds duration {duration}", line_number
        )
    return QuerySample(
        id=str(obj["id"]),
        video_id=str(obj["video"]),
        target_interval=(start, end),
        text=str(obj["query"]),
    )


def write_dataset(path: str | Path, corpus: list[tuple[VideoSample, list[QuerySample]]]) -> None:
    """Write videos.jsonl + queries.jsonl + feature/embedding sidecars."""
    root = Path(path)
    (root / "features").mkdir(parents=True, exist_ok=True)
    embeddings: dict[str, np.ndarray] = {}
    with open(root / "videos.jsonl", "w", encoding="utf-8") as vf:
        for video, _ in corpus:
            record = {
                "id": video.id,
                "duration": video.duration_s,
                "fps": video.fps,
                "num_timesteps": video.num_timesteps,
                "seed": video.seed,
                "features_file": f"features/{video.id}.f2gd",
                "events": [
                    {
                        "start_time": ev.start_s,
                        "end_time": ev.end_s,
                        "archetype": ev.archetype_id,
                        "name": archetype_name(ev.archetype_id),
                    }
                    for ev in video.script.events
                ],
            }
            vf.write(json.dumps(record) + "\n")
            write_tensors(root / "features" / f"{video.id}.f2gd", {"features": video.features})
    with open(root / "queries.jsonl", "w", encoding="utf-8") as qf:
        for video, queries in corpus:
            for q in queries:
                record = {
                    "id": q.id,
                    "video": q.video_id,
                    "start_time": q.target_interval[0],
                    "end_time": q.target_interval[1],
                    "query": q.text,
                    "duration": video.duration_s,
                }
                qf.write(json.dumps(record) + "\n")
                if q.query_embedding is not None:
                    embeddings[q.id] = q.query_embedding
    if embeddings:
        write_tensors(root / "query_embeddings.f2gd", embeddings)


def read_dataset(path: str | Path) -> list[tuple[VideoSample, list[QuerySample]]]:
    root = Path(path)
    videos: dict[str, VideoSample] = {}
    order: list[str] = []
    for lineno, obj in _read_jsonl(root / "videos.jsonl"):
        try:
            events = [
                Event(float(e["start_time"]), float(e["end_time"]), int(e["archetype"]))
                for e in obj["events"]
            ]
            script = EventScript(duration_s=float(obj["duration"]), events=events)
            feats = read_tensors(root / obj["features_file"])["features"]
            video = VideoSample(
                id=str(obj["id"]),
                script=script,
                features=feats,
                fps=float(obj["fps"]),
                seed=int(obj["seed"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(str(exc), lineno) from exc
        script.validate()
        if video.num_timesteps != math.ceil(script.duration_s * video.fps):
            raise DatasetParseError(
                f"feature rows {video.num_timesteps} != ceil(duration*fps)", lineno
            )
        videos[video.id] = video
        order.append(video.id)
    emb_path = root / "query_embeddings.f2gd"
    embeddings = read_tensors(emb_path) if emb_path.exists() else {}
    queries: dict[str, list[QuerySample]] = {vid: [] for vid in order}
    for lineno, obj in _read_jsonl(root / "queries.jsonl"):
        q = parse_eval_record(obj, lineno)
        if q.video_id not in videos:
            raise DatasetParseError(f"unknown video {q.video_id!r}", lineno)
        q.query_embedding = embeddings.get(q.id)
        queries[q.video_id].append(q)
    return [(videos[vid], queries[vid]) for vid in order]


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(obj, dict):
                raise DatasetParseError("record is not an object", lineno)
            yield lineno, obj
