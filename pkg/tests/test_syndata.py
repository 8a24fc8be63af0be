from __future__ import annotations

import json
import math

import numpy as np
import pytest

from tempoground.errors import DatasetParseError, GenerationError
from tempoground.numerics.rng import Rng
from tempoground import syndata
from tempoground.syndata import (
    ArchetypeBank,
    CorpusConfig,
    boundary_contrast,
    generate_corpus,
    parse_eval_record,
    pool_spatial,
    read_dataset,
    write_dataset,
)


def small_cfg(**overrides) -> CorpusConfig:
    base = dict(
        num_videos=4,
        duration_range=(40.0, 70.0),
        events_range=(2, 3),
        num_archetypes=4,
    )
    base.update(overrides)
    return CorpusConfig(**base)


def test_same_seed_byte_identical(tmp_path):
    cfg = small_cfg()
    for d in ("a", "b"):
        write_dataset(tmp_path / d, generate_corpus(cfg, seed=42))
    for name in ("videos.jsonl", "queries.jsonl", "query_embeddings.f2gd"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for f in sorted((tmp_path / "a" / "features").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "features" / f.name).read_bytes()


def test_different_seed_differs():
    a = generate_corpus(small_cfg(), seed=1)
    b = generate_corpus(small_cfg(), seed=2)
    assert not np.array_equal(a[0][0].features, b[0][0].features)


def test_noiseless_features_lie_on_trajectory():
    cfg = small_cfg(noise_level=0.0, spatial_tokens=1)
    corpus = generate_corpus(cfg, seed=3)
    bank = ArchetypeBank(Rng(3).child("bank"), cfg)
    video, _ = corpus[0]
    ev = video.script.events[0]
    centers = (np.arange(video.num_timesteps) + 0.5) / video.fps
    mask = (centers >= ev.start_s) & (centers < ev.end_s)
    expected = bank[ev.archetype_id].value(centers[mask] - ev.start_s)
    assert np.allclose(video.features[mask, 0, :], expected, atol=1e-12)


def test_exhaustive_script_validity_200_videos():
    cfg = CorpusConfig(num_videos=200, duration_range=(60.0, 120.0), events_range=(2, 5))
    corpus = generate_corpus(cfg, seed=11)
    assert len(corpus) == 200
    for video, queries in corpus:
        video.script.validate(cfg.events_range[1])
        assert video.num_timesteps == math.ceil(video.duration_s * cfg.fps)
        assert np.all(np.isfinite(video.features))
        assert 2 <= len(video.script.events) <= 5
        targets = {(ev.start_s, ev.end_s) for ev in video.script.events}
        archetypes = [ev.archetype_id for ev in video.script.events]
        assert len(set(archetypes)) == len(archetypes)
        assert len(queries) == len(video.script.events)
        for q in queries:
            assert q.target_interval in targets
            assert np.linalg.norm(q.query_embedding) > 0


def test_infeasible_packing_raises():
    cfg = small_cfg(duration_range=(10.0, 12.0), events_range=(3, 3), min_event_s=6.0)
    with pytest.raises(GenerationError):
        generate_corpus(cfg, seed=0)


def test_boundary_contrast_exceeds_within():
    corpus = generate_corpus(small_cfg(num_videos=8), seed=5)
    cross = []
    within = []
    for video, _ in corpus:
        c, w = boundary_contrast(video)
        cross.append(c)
        within.append(w)
    assert np.mean(cross) > np.mean(within)


# ---------------------------------------------------------------------------
# pooling


def test_pool_spatial_single_token_squeezes():
    x = Rng(1).normal((5, 1, 3))
    assert np.array_equal(pool_spatial(x), x[:, 0, :])


def test_pool_spatial_mean():
    x = np.zeros((1, 2, 1))
    x[0, 0, 0] = 1.0
    x[0, 1, 0] = 3.0
    assert pool_spatial(x)[0, 0] == 2.0


def test_pool_spatial_matches_bruteforce():
    x = Rng(2).normal((4, 3, 2))
    expected = np.zeros((4, 2))
    for i in range(4):
        for d in range(2):
            expected[i, d] = sum(x[i, s, d] for s in range(3)) / 3
    assert np.allclose(pool_spatial(x), expected, atol=1e-12)


# ---------------------------------------------------------------------------
# dataset io


def test_round_trip_equality(tmp_path):
    corpus = generate_corpus(small_cfg(), seed=9)
    write_dataset(tmp_path / "ds", corpus)
    back = read_dataset(tmp_path / "ds")
    assert len(back) == len(corpus)
    for (v1, qs1), (v2, qs2) in zip(corpus, back):
        assert v1.id == v2.id
        assert v1.duration_s == v2.duration_s
        assert v1.fps == v2.fps
        assert np.array_equal(v1.features, v2.features)
        assert [
            (e.start_s, e.end_s, e.archetype_id) for e in v1.script.events
        ] == [(e.start_s, e.end_s, e.archetype_id) for e in v2.script.events]
        assert len(qs1) == len(qs2)
        for q1, q2 in zip(qs1, qs2):
            assert (q1.id, q1.video_id, q1.text) == (q2.id, q2.video_id, q2.text)
            assert q1.target_interval == q2.target_interval
            assert np.array_equal(q1.query_embedding, q2.query_embedding)


def test_parse_eval_record_appendix_shape():
    record = {
        "id": "v_uqiMw7tQ1Cc_1",
        "video": "v_uqiMw7tQ1Cc.mp4",
        "start_time": 0,
        "end_time": 4.14,
        "query": "Two men both dressed in athletic gear are standing and talking.",
        "duration": 55.15,
    }
    q = parse_eval_record(record)
    assert q.id == "v_uqiMw7tQ1Cc_1"
    assert q.video_id == "v_uqiMw7tQ1Cc.mp4"
    assert q.target_interval == (0.0, 4.14)
    assert q.query_embedding is None


def test_parse_rejects_end_beyond_duration():
    record = {
        "id": "x", "video": "v", "start_time": 0.0,
        "end_time": 60.0, "query": "q", "duration": 55.15,
    }
    with pytest.raises(DatasetParseError):
        parse_eval_record(record)


def test_parse_rejects_inverted_interval():
    record = {
        "id": "x", "video": "v", "start_time": 5.0,
        "end_time": 5.0, "query": "q", "duration": 55.15,
    }
    with pytest.raises(DatasetParseError):
        parse_eval_record(record)


def test_malformed_line_reports_line_number(tmp_path):
    corpus = generate_corpus(small_cfg(num_videos=1), seed=4)
    write_dataset(tmp_path / "ds", corpus)
    qpath = tmp_path / "ds" / "queries.jsonl"
    lines = qpath.read_text().splitlines()
    lines.insert(1, "{not json")
    qpath.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError, match="line 2"):
        read_dataset(tmp_path / "ds")


def test_eval_record_field_order_matches_appendix(tmp_path):
    corpus = generate_corpus(small_cfg(num_videos=1), seed=4)
    write_dataset(tmp_path / "ds", corpus)
    first = (tmp_path / "ds" / "queries.jsonl").read_text().splitlines()[0]
    assert list(json.loads(first).keys()) == [
        "id", "video", "start_time", "end_time", "query", "duration",
    ]
