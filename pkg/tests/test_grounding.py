from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from tempoground.errors import (
    ConfigError,
    EvalError,
    InvalidSpanIdError,
    MultipleCitationsError,
    NoCitationError,
)
from tempoground.grounding import (
    GrounderConfig,
    GroundingOutput,
    SurrogateGrounder,
    assign_citation_target,
    ground,
    identify,
    interval_encoding,
    measure,
    parse_response,
    render_response,
    serialize_instruction,
    snap_interval,
    stage3_joint_step,
    stage3_loss,
)
from tempoground.numerics import ParamStore, Rng, grad_check
from tempoground.perception import PerceptionModel, TemporalModuleConfig
from tempoground.proposal import EvidencePool, EvidenceUnit, ProposalHead, SpanEvidenceEncoder
from tempoground.syndata import CorpusConfig, generate_corpus

GOLDEN_DIR = Path(__file__).parent / "goldens"
WIDTH = 8


def fixture_pool(width=WIDTH, m=4, seed=0) -> EvidencePool:
    intervals = [(0.0, 12.5), (10.0, 24.0), (24.0, 31.5), (31.5, 47.0),
                 (45.0, 58.5), (58.5, 66.0), (66.0, 75.5), (70.0, 81.0)]
    rng = Rng(seed)
    units = [
        EvidenceUnit(span_id=i + 1, interval=iv, tokens=rng.normal((m, width), scale=0.5))
        for i, iv in enumerate(intervals)
    ]
    return EvidencePool(units=units, video_id="fixture", k=8, duration_s=81.0)


def golden_pool() -> EvidencePool:
    pool = fixture_pool()
    for unit in pool.units:
        unit.tokens = np.zeros((4, WIDTH))
    return pool


def make_grounder(seed=1, m=4) -> tuple[ParamStore, SurrogateGrounder]:
    store = ParamStore()
    cfg = GrounderConfig(width=WIDTH, num_tokens=m)
    return store, SurrogateGrounder(store, "grounder", cfg, Rng(seed))


# ---------------------------------------------------------------------------
# serializer goldens


def test_train_template_matches_golden():
    rendered = serialize_instruction(
        golden_pool(), "During what time does the amber cascade appear in the video?",
        "train", 8, 4,
    )
    assert rendered == (GOLDEN_DIR / "instruction_train_k8_m4.txt").read_text()


def test_inference_template_matches_golden():
    rendered = serialize_instruction(golden_pool(), "the amber cascade", "inference", 8, 4)
    assert rendered == (GOLDEN_DIR / "instruction_inference_k8_m4.txt").read_text()


def test_inference_template_embeds_query_phrase():
    rendered = serialize_instruction(golden_pool(), "a rolling plume", "inference", 8, 4)
    assert "During what time, can you see a rolling plume." in rendered


def test_response_format_matches_golden():
    resp = render_response(
        "You can see the amber cascade from 24.0 seconds to 31.5 seconds", 3
    )
    assert resp + "\n" == (GOLDEN_DIR / "response_format.txt").read_text()


def test_serializer_rejects_empty_query_and_k_mismatch():
    with pytest.raises(ConfigError):
        serialize_instruction(golden_pool(), "", "train", 8, 4)
    with pytest.raises(ConfigError):
        serialize_instruction(golden_pool(), "q", "inference", 4, 4)
    with pytest.raises(ConfigError):
        serialize_instruction(golden_pool(), "q", "chat", 8, 4)


# ---------------------------------------------------------------------------
# response parsing


def test_parse_valid_response():
    parsed = parse_response(
        "The event occurs from 12.0 seconds to 18.5 seconds. Corresponding span: <Span_3>.", 8
    )
    assert parsed.cited_id == 3
    assert parsed.interval == (12.0, 18.5)
    assert parsed.answer == "The event occurs from 12.0 seconds to 18.5 seconds"


def test_parse_rejects_zero_and_multiple_citations():
    with pytest.raises(NoCitationError):
        parse_response("no citation here", 8)
    with pytest.raises(MultipleCitationsError):
        parse_response("both <Span_2> and <Span_5> appear", 8)


def test_parse_rejects_out_of_range_id():
    with pytest.raises(InvalidSpanIdError):
        parse_response("Corresponding span: <Span_9>.", 8)


def test_parse_fuzzed_roundtrip():
    rng = Rng(50)
    for trial in range(200):
        z = int(rng.integers(1, 9))
        t0 = round(float(rng.uniform((), 0.0, 80.0)), 1)
        t1 = round(t0 + float(rng.uniform((), 0.1, 15.0)), 1)
        answer = f"You can see something from {t0:.1f} seconds to {t1:.1f} seconds"
        parsed = parse_response(render_response(answer, z), 8)
        assert parsed.cited_id == z
        assert parsed.interval == (round(t0, 1), round(t1, 1))


# ---------------------------------------------------------------------------
# citation target


def test_citation_target_example():
    pool = fixture_pool()
    pool.units = pool.units[:3]
    pool.k = 3
    pool.units[0].interval = (0.0, 10.0)
    pool.units[1].interval = (10.0, 20.0)
    pool.units[2].interval = (18.0, 30.0)
    z, fallback = assign_citation_target(pool, (17.0, 29.0))
    assert z == 3 and not fallback


def test_citation_target_exact_match():
    pool = fixture_pool()
    z, fallback = assign_citation_target(pool, pool.units[4].interval)
    assert z == 5 and not fallback


def test_citation_target_fallback_nearest_center():
    pool = fixture_pool()
    pool.units = [
        EvidenceUnit(1, (0.0, 1.0), np.zeros((4, WIDTH))),
        EvidenceUnit(2, (70.0, 71.0), np.zeros((4, WIDTH))),
    ]
    pool.k = 2
    z, fallback = assign_citation_target(pool, (50.0, 55.0))
    assert fallback
    assert z == 2


# ---------------------------------------------------------------------------
# identify / measure heads


def test_identify_uniform_for_identical_units():
    store, grounder = make_grounder()
    pool = fixture_pool()
    tokens = Rng(2).normal((4, WIDTH))
    for unit in pool.units:
        unit.tokens = tokens.copy()
        unit.interval = (10.0, 20.0)
    probs = identify(grounder, pool, Rng(3).normal((WIDTH,)))
    assert np.allclose(probs, 1.0 / 8, atol=1e-12)
    assert abs(probs.sum() - 1.0) < 1e-9


def test_identify_sums_to_one():
    store, grounder = make_grounder()
    probs = identify(grounder, fixture_pool(), Rng(4).normal((WIDTH,)))
    assert abs(probs.sum() - 1.0) < 1e-9


def test_untrained_identify_near_chance():
    hits = 0
    n = 400
    for i in range(n):
        store, grounder = make_grounder(seed=100 + i % 7)
        pool = fixture_pool(seed=200 + i)
        q = Rng(300 + i).normal((WIDTH,))
        target = int(Rng(400 + i).integers(1, 9))
        probs = identify(grounder, pool, q)
        if int(np.argmax(probs)) + 1 == target:
            hits += 1
    assert abs(hits / n - 1.0 / 8) < 0.05


def test_measure_zero_offsets_identity():
    store, grounder = make_grounder()
    # zero the output layer so offsets vanish
    grounder.measure_mlp.fc2.w.data[...] = 0.0
    grounder.measure_mlp.fc2.b.data[...] = 0.0
    pool = fixture_pool()
    t = measure(grounder, pool.units[2], Rng(5).normal((WIDTH,)), pool.duration_s)
    assert t == pool.units[2].interval


def test_measure_clamps_to_duration():
    store, grounder = make_grounder()
    pool = fixture_pool()
    unit = pool.units[7]  # (70, 81) near the end
    grounder.measure_mlp.fc2.b.data[...] = 50.0  # saturate tanh -> +r offsets
    t = measure(grounder, unit, Rng(6).normal((WIDTH,)), pool.duration_s)
    assert 0.0 <= t[0] < t[1] <= pool.duration_s


def test_measure_locality_bound():
    store, grounder = make_grounder()
    pool = fixture_pool()
    r = grounder.cfg.offset_range
    for unit in pool.units:
        (lo, hi), _ = grounder.measure_fwd(unit, Rng(7).normal((WIDTH,)), pool.duration_s)
        length = unit.interval[1] - unit.interval[0]
        assert abs(lo - unit.interval[0]) <= r * length + 1e-9
        assert abs(hi - unit.interval[1]) <= r * length + 1e-9


def test_measure_grad_check():
    store, grounder = make_grounder()
    pool = fixture_pool()
    unit = pool.units[1]
    tokens_p = store.add("tokens", unit.tokens.copy())
    q = Rng(8).normal((WIDTH,))
    gt = (12.0, 22.0)

    def loss_fn():
        unit.tokens = tokens_p.data
        (lo, hi), cache = grounder.measure_fwd(unit, q, pool.duration_s)
        loss = (abs(lo - gt[0]) + abs(hi - gt[1])) / pool.duration_s
        dinterval = np.array([np.sign(lo - gt[0]), np.sign(hi - gt[1])]) / pool.duration_s
        tokens_p.grad += grounder.measure_bwd(dinterval, cache)
        return loss

    report = grad_check(loss_fn, store, h=1e-5, tol=1e-6, max_entries_per_param=24)
    assert report.passed, str(report)


def test_stage3_loss_grad_check():
    store, grounder = make_grounder()
    pool = fixture_pool()
    token_params = [store.add(f"tokens{i}", u.tokens.copy()) for i, u in enumerate(pool.units)]
    q = Rng(9).normal((WIDTH,))
    gt = (25.0, 33.0)

    def loss_fn():
        for unit, p in zip(pool.units, token_params):
            unit.tokens = p.data
        losses, backward = stage3_loss(grounder, pool, q, gt)
        for p, dtok in zip(token_params, backward()):
            p.grad += dtok
        return losses.total

    report = grad_check(loss_fn, store, h=1e-5, tol=1e-6, max_entries_per_param=12)
    assert report.passed, str(report)


def test_interval_encoding_shape_and_determinism():
    e = interval_encoding((10.0, 20.0), 60.0, 4)
    assert e.shape == (16,)
    assert np.array_equal(e, interval_encoding((10.0, 20.0), 60.0, 4))


# ---------------------------------------------------------------------------
# stage-3 losses


def test_stage3_perfect_prediction_zero_loss():
    store, grounder = make_grounder()
    pool = fixture_pool()
    gt = pool.units[2].interval
    # zero measure offsets; force identify to put all mass on unit 3
    grounder.measure_mlp.fc2.w.data[...] = 0.0
    grounder.measure_mlp.fc2.b.data[...] = 0.0
    losses, _ = stage3_loss(grounder, pool, Rng(10).normal((WIDTH,)), gt)
    assert losses.time_loss < 1e-12
    # id loss is the remaining term; alpha=0 removes it
    losses0, _ = stage3_loss(grounder, pool, Rng(10).normal((WIDTH,)), gt, alpha=0.0)
    assert losses0.total == losses0.time_loss * grounder.cfg.beta


def test_stage3_uniform_identify_logk():
    store, grounder = make_grounder()
    pool = fixture_pool()
    tokens = Rng(11).normal((4, WIDTH))
    for unit in pool.units:
        unit.tokens = tokens.copy()
        unit.interval = (10.0, 20.0)
    # identical units give a uniform identify distribution
    losses, _ = stage3_loss(grounder, pool, Rng(12).normal((WIDTH,)), (10.0, 20.0))
    assert abs(losses.id_loss - np.log(8)) < 1e-9


def test_snap_interval_grid_and_order():
    assert snap_interval(12.04, 18.46, 60.0) == (12.0, 18.5)
    t0, t1 = snap_interval(30.0, 30.01, 60.0)
    assert t1 > t0
    t0, t1 = snap_interval(59.99, 60.2, 60.0)
    assert t1 <= 60.0 and t0 < t1


# ---------------------------------------------------------------------------
# ground()


def test_ground_deterministic_at_temperature_zero():
    store, grounder = make_grounder()
    pool = fixture_pool()
    q = Rng(13).normal((WIDTH,))
    a = ground(grounder, pool, q, "the amber cascade", temperature=0.0)
    b = ground(grounder, pool, q, "the amber cascade", temperature=0.0)
    assert a.cited_id == b.cited_id
    assert a.interval == b.interval
    assert a.response == b.response


def test_ground_oracle_cites_best():
    pool = fixture_pool()
    gt = (25.0, 33.0)
    out = ground(None, pool, None, "x", oracle_gt=gt)
    from tempoground.evalmetrics import iou

    best = max(iou(u.interval, gt) for u in pool.units)
    assert iou(out.interval, gt) == best
    assert out.oracle


def test_ground_response_reparses():
    store, grounder = make_grounder()
    pool = fixture_pool()
    out = ground(grounder, pool, Rng(14).normal((WIDTH,)), "a woven mosaic", temperature=0.0)
    parsed = parse_response(out.response, pool.k)
    assert parsed.cited_id == out.cited_id
    assert parsed.interval == out.interval


def test_ground_temperature_sampling_reproducible():
    store, grounder = make_grounder()
    pool = fixture_pool()
    q = Rng(15).normal((WIDTH,))
    a = ground(grounder, pool, q, "x", temperature=1.0, rng=Rng(77))
    b = ground(grounder, pool, q, "x", temperature=1.0, rng=Rng(77))
    assert a.cited_id == b.cited_id
    draws = {ground(grounder, pool, q, "x", temperature=5.0, rng=Rng(i)).cited_id for i in range(40)}
    assert len(draws) > 1  # hot sampling actually explores


def test_ground_identify_shift_invariance():
    store, grounder = make_grounder()
    pool = fixture_pool()
    q = Rng(16).normal((WIDTH,))
    probs1, logits1, _ = grounder.identify_fwd(pool, q)
    # shifting every logit by a constant (e.g. via the output bias) keeps
    # the distribution unchanged
    grounder.identify_mlp.fc2.b.data[...] += 3.7
    probs2, logits2, _ = grounder.identify_fwd(pool, q)
    assert np.allclose(logits2 - logits1, 3.7, atol=1e-9)
    assert np.allclose(probs1, probs2, atol=1e-12)


def test_ground_empty_pool_raises():
    store, grounder = make_grounder()
    pool = fixture_pool()
    pool.units = []
    with pytest.raises(EvalError):
        ground(grounder, pool, Rng(17).normal((WIDTH,)), "x", temperature=0.0)


# ---------------------------------------------------------------------------
# stage-3 joint step


def _joint_setup():
    cfg = TemporalModuleConfig(width=WIDTH, depth=1, heads=2, predictor_depth=0, predictor_width=WIDTH)
    store = ParamStore()
    model = PerceptionModel(store, cfg, Rng(18))
    head = ProposalHead(store, "proposal", WIDTH, heads=2, depth=1, mlp_ratio=2.0, rng=Rng(19))
    see = SpanEvidenceEncoder(store, "see", WIDTH, num_queries=4, heads=2, depth=2, rng=Rng(20))
    grounder = SurrogateGrounder(store, "grounder", GrounderConfig(width=WIDTH, num_tokens=4), Rng(21))
    corpus = generate_corpus(
        CorpusConfig(num_videos=2, width=WIDTH, duration_range=(40.0, 60.0),
                     events_range=(2, 3), num_archetypes=4),
        seed=22,
    )
    batch = []
    for video, queries in corpus:
        gts_norm = [
            (ev.start_s / video.duration_s, ev.end_s / video.duration_s)
            for ev in video.script.events
        ]
        for q in queries:
            batch.append((video, q.query_embedding, q.target_interval, gts_norm))
    return store, model, head, see, grounder, batch


def test_joint_step_gamma_zero_no_proposal_gradient():
    store, model, head, see, grounder, batch = _joint_setup()
    grounder.cfg.gamma = 0.0
    stage3_joint_step(model.encoder, head, see, grounder, store, batch[:2], k=4, lr=1e-3)
    for name in store.names():
        if name.startswith("proposal."):
            assert np.all(store.get(name).grad == 0.0), name
    enc_grads = [np.abs(store.get(n).grad).max() for n in store.names() if n.startswith("encoder.")]
    assert max(enc_grads) > 0.0  # evidence-token path reaches the encoder


def test_joint_step_lr_mult_zero_freezes_perception():
    store, model, head, see, grounder, batch = _joint_setup()
    before = {n: store.get(n).data.copy() for n in store.names()}
    stage3_joint_step(model.encoder, head, see, grounder, store, batch[:2], k=4, lr=1e-3,
                      perception_lr_mult=0.0)
    for name in store.names():
        if name.startswith(("encoder.", "proposal.")):
            assert np.array_equal(store.get(name).data, before[name]), name
    # grounder and evidence encoder keep training (identify fc2.b is
    # excluded: its gradient is exactly zero by softmax shift invariance)
    moved = [
        n for n in store.names()
        if n.startswith(("see.", "grounder."))
        and not np.array_equal(store.get(n).data, before[n])
    ]
    assert "grounder.measure.fc1.w" in moved
    assert "grounder.identify.fc1.w" in moved
    assert any(n.startswith("see.") for n in moved)


def test_joint_step_loss_decreases():
    store, model, head, see, grounder, batch = _joint_setup()
    first = stage3_joint_step(model.encoder, head, see, grounder, store, batch, k=4, lr=3e-3)
    for _ in range(60):
        last = stage3_joint_step(model.encoder, head, see, grounder, store, batch, k=4, lr=3e-3)
    assert last.total < first.total
