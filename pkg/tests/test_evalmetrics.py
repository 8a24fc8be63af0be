from __future__ import annotations

import numpy as np
import pytest

from tempoground.errors import EvalError
from tempoground.evalmetrics import (
    GAP_THRESHOLD,
    build_report,
    citation_gap,
    export_report,
    histogram,
    iou,
    mean_iou,
    pca_project,
    read_report_scalars,
    recall_at,
    separability_probe,
    stability_decompose,
    stagewise_diagnostics,
    write_pca_csv,
)
from tempoground.numerics.rng import Rng


# ---------------------------------------------------------------------------
# iou family


def test_iou_identical_disjoint_partial():
    assert iou((3.0, 7.0), (3.0, 7.0)) == 1.0
    assert iou((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert abs(iou((2.0, 6.0), (4.0, 8.0)) - 2.0 / 6.0) < 1e-12


def test_iou_zero_union():
    assert iou((5.0, 5.0), (5.0, 5.0)) == 0.0


def test_recall_and_mean():
    ious = [0.8, 0.4, 0.6]
    assert abs(recall_at(ious, 0.5) - 2.0 / 3.0) < 1e-12
    assert recall_at([1.0, 1.0], 0.7) == 1.0
    assert abs(mean_iou(ious) - 0.6) < 1e-12
    with pytest.raises(EvalError):
        recall_at([], 0.5)
    with pytest.raises(EvalError):
        mean_iou([])


def test_threshold_monotonicity_random():
    rng = Rng(1)
    ious = list(rng.uniform((200,)))
    assert recall_at(ious, 0.7) <= recall_at(ious, 0.5) <= recall_at(ious, 0.3)


# ---------------------------------------------------------------------------
# citation gap


def test_citation_gap_best_cited_is_zero():
    pool = [(0.0, 10.0), (10.0, 20.0), (18.0, 30.0)]
    gt = (17.0, 29.0)
    best_id = int(np.argmax([iou(t, gt) for t in pool])) + 1
    assert citation_gap(pool, best_id, gt) == 0.0


def test_citation_gap_derived_value():
    pool = [(0.0, 10.0), (10.0, 20.0), (18.0, 30.0)]
    gt = (17.0, 29.0)
    gap = citation_gap(pool, 2, gt)
    expected = iou((18.0, 30.0), gt) - iou((10.0, 20.0), gt)
    assert abs(gap - expected) < 1e-12
    assert abs(expected - 0.688) < 5e-3


def test_citation_gap_bounds_and_errors():
    rng = Rng(2)
    for trial in range(200):
        k = int(rng.integers(1, 9))
        pool = []
        for _ in range(k):
            a = float(rng.uniform((), 0.0, 50.0))
            pool.append((a, a + float(rng.uniform((), 0.5, 20.0))))
        g0 = float(rng.uniform((), 0.0, 50.0))
        gt = (g0, g0 + float(rng.uniform((), 0.5, 20.0)))
        z = int(rng.integers(1, k + 1))
        gap = citation_gap(pool, z, gt)
        assert 0.0 <= gap <= 1.0
    with pytest.raises(EvalError):
        citation_gap([(0.0, 1.0)], 2, (0.0, 1.0))


# ---------------------------------------------------------------------------
# stage-wise diagnostics


def _random_eval_set(seed, n_queries=50, k=8):
    rng = Rng(seed)
    pools = {}
    preds = []
    gts = {}
    for i in range(n_queries):
        vid = f"v{i}"
        units = []
        for _ in range(k):
            a = float(rng.uniform((), 0.0, 50.0))
            units.append((a, a + float(rng.uniform((), 1.0, 20.0))))
        pools[vid] = units
        g0 = float(rng.uniform((), 0.0, 50.0))
        gt = (g0, g0 + float(rng.uniform((), 1.0, 20.0)))
        qid = f"q{i}"
        gts[qid] = gt
        z = int(rng.integers(1, k + 1))
        t0 = float(rng.uniform((), 0.0, 50.0))
        preds.append({
            "id": qid, "video": vid, "cited_id": z,
            "t_start": t0, "t_end": t0 + float(rng.uniform((), 1.0, 20.0)),
        })
    return pools, preds, gts


def test_stagewise_matches_bruteforce():
    pools, preds, gts = _random_eval_set(3)
    retrieve, cited, refined = stagewise_diagnostics(pools, preds, gts)
    # independent recomputation with plain loops
    r_sum = c_sum = f_sum = 0.0
    for pred in preds:
        gt = gts[pred["id"]]
        units = pools[pred["video"]]
        best = 0.0
        for t in units:
            v = iou(t, gt)
            if v > best:
                best = v
        r_sum += best
        c_sum += iou(units[pred["cited_id"] - 1], gt)
        f_sum += iou((pred["t_start"], pred["t_end"]), gt)
    n = len(preds)
    assert abs(retrieve - r_sum / n) < 1e-9
    assert abs(cited - c_sum / n) < 1e-9
    assert abs(refined - f_sum / n) < 1e-9
    assert cited <= retrieve + 1e-12


def test_stagewise_oracle_equals_retrieve():
    pools, preds, gts = _random_eval_set(4)
    for pred in preds:
        gt = gts[pred["id"]]
        units = pools[pred["video"]]
        best = int(np.argmax([iou(t, gt) for t in units])) + 1
        pred["cited_id"] = best
        pred["t_start"], pred["t_end"] = units[best - 1]
    retrieve, cited, refined = stagewise_diagnostics(pools, preds, gts)
    assert abs(cited - retrieve) < 1e-12
    assert abs(refined - cited) < 1e-12


def test_stagewise_id_mismatch_raises():
    pools, preds, gts = _random_eval_set(5, n_queries=3)
    preds[0]["cited_id"] = 99
    with pytest.raises(EvalError):
        stagewise_diagnostics(pools, preds, gts)


# ---------------------------------------------------------------------------
# stability decomposition


def test_stability_classes():
    counts = stability_decompose([(0.0, 0.0)])
    assert counts.consistent_miss == 1
    counts = stability_decompose([(0.0, 0.5)])
    assert counts.stochastic_collapse["[0.5,1]"] == 1
    counts = stability_decompose([(0.3, 0.4)])
    assert counts.stable_nonzero == 1
    assert abs(counts.abs_delta_ious[0] - 0.1) < 1e-12


def test_stability_partition_and_bruteforce():
    rng = Rng(6)
    pairs = []
    for _ in range(1000):
        a = float(rng.uniform(())) if rng.uniform(()) > 0.3 else 0.0
        b = float(rng.uniform(())) if rng.uniform(()) > 0.3 else 0.0
        pairs.append((a, b))
    counts = stability_decompose(pairs)
    assert counts.consistent_miss + counts.collapse_total + counts.stable_nonzero == counts.total == 1000
    # independent reclassification
    cm = sc = sn = 0
    buckets = {"[0,0.3)": 0, "[0.3,0.5)": 0, "[0.5,1]": 0}
    for a, b in pairs:
        if a == 0.0 and b == 0.0:
            cm += 1
        elif (a == 0.0) != (b == 0.0):
            sc += 1
            v = a if a > 0 else b
            if v < 0.3:
                buckets["[0,0.3)"] += 1
            elif v < 0.5:
                buckets["[0.3,0.5)"] += 1
            else:
                buckets["[0.5,1]"] += 1
        else:
            sn += 1
    assert counts.consistent_miss == cm
    assert counts.collapse_total == sc
    assert counts.stable_nonzero == sn
    assert counts.stochastic_collapse == buckets


def test_stability_rejects_out_of_range():
    with pytest.raises(EvalError):
        stability_decompose([(1.2, 0.0)])


# ---------------------------------------------------------------------------
# histograms


def test_histogram_counts_sum_and_renormalization():
    rng = Rng(7)
    values = list(rng.uniform((500,)))
    rows = histogram(values)
    assert sum(r[2] for r in rows) == 500
    total_density = sum(r[3] * (r[1] - r[0]) for r in rows)
    assert abs(total_density - 1.0) < 1e-9
    dropped = histogram(values, drop_first_bin=True)
    assert len(dropped) == len(rows) - 1
    total_density = sum(r[3] * (r[1] - r[0]) for r in dropped)
    assert abs(total_density - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# pca and separability


def test_pca_2d_centered_is_isometry():
    rng = Rng(8)
    x = rng.normal((40, 2), scale=2.0)
    x = x - x.mean(axis=0)
    coords, degenerate = pca_project(x)
    assert not degenerate
    d_orig = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    d_proj = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    assert np.allclose(d_orig, d_proj, atol=1e-9)


def test_pca_degenerate_flagged():
    x = np.tile(np.array([1.0, 2.0, 3.0]), (10, 1)) * np.arange(10)[:, None]
    coords, degenerate = pca_project(x)  # rank-1 data
    assert degenerate
    assert np.allclose(coords[:, 1], 0.0, atol=1e-9)


def test_probe_separated_clusters():
    rng = Rng(9)
    a = rng.normal((20, 4)) + 10.0
    b = rng.normal((20, 4)) - 10.0
    x = np.vstack([a, b])
    labels = np.array([True] * 20 + [False] * 20)
    assert separability_probe(x, labels) == 1.0


def test_probe_matches_bruteforce():
    rng = Rng(10)
    x = rng.normal((30, 3))
    labels = rng.uniform((30,)) > 0.5
    if labels.all() or not labels.any():
        labels[0] = not labels[0]
    acc = separability_probe(x, labels)
    correct = 0
    for i in range(len(x)):
        same = [j for j in range(len(x)) if j != i and labels[j] == labels[i]]
        other = [j for j in range(len(x)) if labels[j] != labels[i]]
        if not same:
            continue
        c_same = x[same].mean(axis=0)
        c_other = x[other].mean(axis=0)
        d_own = np.linalg.norm(x[i] - c_same)
        d_other = np.linalg.norm(x[i] - c_other)
        pred = labels[i] if d_own < d_other else (not labels[i])
        if d_own == d_other:
            pred = False
        correct += pred == labels[i]
    assert acc == correct / len(x)


def test_pca_csv_columns(tmp_path):
    coords = Rng(11).normal((5, 2))
    write_pca_csv(tmp_path / "pca.csv", coords, np.array([1, 0, 1, 0, 1]))
    header = (tmp_path / "pca.csv").read_text().splitlines()[0]
    assert header == "index,pc1,pc2,time_order,inside_flag"


# ---------------------------------------------------------------------------
# report export


def test_report_roundtrip_and_byte_stability(tmp_path):
    pools, preds, gts = _random_eval_set(12)
    report = build_report(pools, preds, gts, stability_pairs=[(0.0, 0.0), (0.4, 0.5)])
    paths1 = export_report(report, tmp_path / "r1")
    paths2 = export_report(report, tmp_path / "r2")
    assert paths1["summary"].read_bytes() == paths2["summary"].read_bytes()
    scalars = read_report_scalars(paths1["summary"])
    assert scalars["miou"] == report.miou
    assert scalars["retrieve_at_k_miou"] == report.retrieve_at_k
    assert scalars["cited_miou"] == report.cited_miou
    for m in (0.3, 0.5, 0.7):
        assert scalars[f"recall_at_{m:g}"] == report.r_at[m]
    assert scalars["sample_count"] == report.sample_count
    # histogram counts in the exported CSV sum to the sample count
    hist_rows = paths1["gap_histogram"].read_text().splitlines()[1:]
    assert sum(int(r.split(",")[2]) for r in hist_rows) == report.sample_count


def test_report_gap_fraction_definition():
    pools, preds, gts = _random_eval_set(13)
    report = build_report(pools, preds, gts)
    gaps = [q.citation_gap for q in report.per_query]
    assert report.gap_fraction_below == sum(1 for g in gaps if g < GAP_THRESHOLD) / len(gaps)
    assert report.cited_miou <= report.retrieve_at_k + 1e-12
