"""Metrics and diagnostics: IoU family, stage-wise decomposition,
citation gap, repeated-inference stability, latent-geometry probes, and
report serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tempoground.errors import EvalError

Interval = tuple[float, float]

# severity buckets for the non-zero IoU of a stochastic collapse
COLLAPSE_BUCKETS = ((0.0, 0.3), (0.3, 0.5), (0.5, 1.0))
HIST_BIN_WIDTH = 0.02


def iou(a: Interval, b: Interval) -> float:
    """Interval intersection over union; 0 when the union is empty."""
    a0, a1 = a
    b0, b1 = b
    if a0 > a1 or b0 > b1:
        raise EvalError(f"interval start exceeds end: {a}, {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def recall_at(ious: list[float], m: float) -> float:
    if not ious:
        raise EvalError("recall_at on empty list")
    return sum(1 for v in ious if v >= m) / len(ious)


def mean_iou(ious: list[float]) -> float:
    if not ious:
        raise EvalError("mean_iou on empty list")
    return float(np.mean(ious))


def citation_gap(pool_intervals: list[Interval], cited_id: int, gt: Interval) -> float:
    """IoU of the best pool unit minus IoU of the cited unit (in [0, 1])."""
    if not 1 <= cited_id <= len(pool_intervals):
        raise EvalError(f"cited id {cited_id} not in pool of {len(pool_intervals)}")
    best = max(iou(t, gt) for t in pool_intervals)
    cite = iou(pool_intervals[cited_id - 1], gt)
    return best - cite


def stagewise_diagnostics(
    pools: dict[str, list[Interval]],
    predictions: list[dict],
    gts: dict[str, Interval],
) -> tuple[float, float, float]:
    """(Retrieve@K, Cited, Refined) mean IoU over queries.

    ``predictions`` rows need: id, video, cited_id, t_start, t_end.
    """
    retrieve, cited, refined = [], [], []
    for pred in predictions:
        qid = pred["id"]
        if qid not in gts:
            raise EvalError(f"prediction {qid!r} has no ground truth")
        if pred["video"] not in pools:
            raise EvalError(f"prediction {qid!r} references unknown pool {pred['video']!r}")
        gt = gts[qid]
        units = pools[pred["video"]]
        z = int(pred["cited_id"])
        if not 1 <= z <= len(units):
            raise EvalError(f"prediction {qid!r} cites unit {z} outside pool")
        retrieve.append(max(iou(t, gt) for t in units))
        cited.append(iou(units[z - 1], gt))
        refined.append(iou((pred["t_start"], pred["t_end"]), gt))
    if not retrieve:
        raise EvalError("no predictions to evaluate")
    return float(np.mean(retrieve)), float(np.mean(cited)), float(np.mean(refined))


# ---------------------------------------------------------------------------
# repeated-inference stability


@dataclass
class StabilityCounts:
    consistent_miss: int = 0
    stochastic_collapse: dict[str, int] = field(
        default_factory=lambda: {_bucket_name(b): 0 for b in COLLAPSE_BUCKETS}
    )
    stable_nonzero: int = 0
    total: int = 0
    mean_ious: list[float] = field(default_factory=list)
    abs_delta_ious: list[float] = field(default_factory=list)

    @property
    def collapse_total(self) -> int:
        return sum(self.stochastic_collapse.values())


def _bucket_name(b: tuple[float, float]) -> str:
    return f"[{b[0]:g},{b[1]:g}{')' if b[1] < 1.0 else ']'}"


def _collapse_bucket(value: float) -> str:
    for lo, hi in COLLAPSE_BUCKETS:
        if (lo <= value < hi) or (hi == 1.0 and lo <= value <= hi):
            return _bucket_name((lo, hi))
    raise EvalError(f"IoU {value} outside [0, 1]")


def stability_decompose(pairs: list[tuple[float, float]]) -> StabilityCounts:
    """Classify double-decode IoU pairs.

    consistent_miss: both runs at zero IoU; stochastic_collapse: exactly
    one run at zero, bucketed by the other run's IoU; everything else is
    stable_nonzero. Also records per-pair mean IoU and |delta IoU|.
    """
    counts = StabilityCounts()
    for a, b in pairs:
        if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
            raise EvalError(f"IoU pair ({a}, {b}) outside [0, 1]")
        counts.total += 1
        counts.mean_ious.append((a + b) / 2.0)
        counts.abs_delta_ious.append(abs(a - b))
        zero_a = a == 0.0
        zero_b = b == 0.0
        if zero_a and zero_b:
            counts.consistent_miss += 1
        elif zero_a != zero_b:
            counts.stochastic_collapse[_collapse_bucket(max(a, b))] += 1
        else:
            counts.stable_nonzero += 1
    return counts


def histogram(values: list[float], drop_first_bin: bool = False) -> list[tuple[float, float, int, float]]:
    """(bin_left, bin_right, count, density) rows over [0, 1].

    With ``drop_first_bin`` the [0, 0.02) bin is omitted and the densities
    of the remaining bins are renormalized; counts stay raw.
    """
    edges = np.round(np.arange(0.0, 1.0 + HIST_BIN_WIDTH, HIST_BIN_WIDTH), 10)
    counts, _ = np.histogram(values, bins=edges)
    rows = list(zip(edges[:-1], edges[1:], counts))
    if drop_first_bin:
        rows = rows[1:]
    total = sum(c for _, _, c in rows)
    out = []
    for left, right, count in rows:
        density = count / (total * HIST_BIN_WIDTH) if total else 0.0
        out.append((float(left), float(right), int(count), float(density)))
    return out


# ---------------------------------------------------------------------------
# latent geometry probes


def pca_project(latents: np.ndarray) -> tuple[np.ndarray, bool]:
    """Top-2 principal-component coordinates via covariance eigendecomposition.

    Returns (n, 2) coordinates and a degenerate flag set when fewer than
    two informative components exist (remaining coordinates are zero).
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise EvalError(f"pca_project needs (n>=3, d) latents, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    tol = max(1e-12, 1e-9 * max(eigvals[0], 0.0))
    available = int(np.sum(eigvals > tol))
    coords = np.zeros((x.shape[0], 2))
    take = min(2, max(available, 0), x.shape[1])
    if take > 0:
        coords[:, :take] = centered @ eigvecs[:, :take]
    return coords, available < 2


def separability_probe(latents: np.ndarray, inside_labels: np.ndarray) -> float:
    """Leave-one-out nearest-centroid accuracy on inside/outside labels."""
    x = np.asarray(latents, dtype=np.float64)
    y = np.asarray(inside_labels, dtype=bool)
    if x.shape[0] != y.shape[0]:
        raise EvalError("latents and labels disagree in length")
    if y.all() or not y.any():
        raise EvalError("separability probe needs both labels present")
    sums = {True: x[y].sum(axis=0), False: x[~y].sum(axis=0)}
    counts = {True: int(y.sum()), False: int((~y).sum())}
    correct = 0
    for i in range(x.shape[0]):
        label = bool(y[i])
        centroids = {}
        for cls in (True, False):
            s = sums[cls].copy()
            c = counts[cls]
            if cls == label:
                s -= x[i]
                c -= 1
            if c == 0:
                centroids[cls] = None
            else:
                centroids[cls] = s / c
        if centroids[label] is None:
            continue
        d_own = np.linalg.norm(x[i] - centroids[label])
        d_other = np.linalg.norm(x[i] - centroids[not label])
        predicted = label if d_own < d_other else (not label)
        if d_own == d_other:
            predicted = False  # deterministic tie rule: outside
        if predicted == label:
            correct += 1
    return correct / x.shape[0]


def write_pca_csv(path: str | Path, coords: np.ndarray, inside: np.ndarray) -> None:
    """PCA coordinates with time order and inside/outside flags."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "pc1", "pc2", "time_order", "inside_flag"])
        for i in range(coords.shape[0]):
            writer.writerow([i, repr(float(coords[i, 0])), repr(float(coords[i, 1])), i, int(inside[i])])


# ---------------------------------------------------------------------------
# report assembly and serialization


@dataclass
class QueryRecord:
    id: str
    video: str
    iou: float
    retrieve_at_k: float
    cited_iou: float
    citation_gap: float


@dataclass
class MetricReport:
    sample_count: int
    r_at: dict[float, float]
    miou: float
    retrieve_at_k: float
    cited_miou: float
    refined_miou: float
    gap_fraction_below: float  # fraction of queries with gap < 0.10
    gap_histogram: list[tuple[float, float, int, float]]
    per_query: list[QueryRecord]
    stability: StabilityCounts | None = None

    def scalar_items(self) -> list[tuple[str, float]]:
        items = [("sample_count", float(self.sample_count))]
        for m in sorted(self.r_at):
            items.append((f"recall_at_{m:g}", self.r_at[m]))
        items += [
            ("miou", self.miou),
            ("retrieve_at_k_miou", self.retrieve_at_k),
            ("cited_miou", self.cited_miou),
            ("refined_miou", self.refined_miou),
            ("citation_gap_below_0.10", self.gap_fraction_below),
        ]
        if self.stability is not None:
            s = self.stability
            items += [
                ("stability_pairs", float(s.total)),
                ("stability_consistent_miss", float(s.consistent_miss)),
                ("stability_stable_nonzero", float(s.stable_nonzero)),
            ]
            for name, count in s.stochastic_collapse.items():
                items.append((f"stability_collapse_{name}", float(count)))
        return items


GAP_THRESHOLD = 0.10


def build_report(
    pools: dict[str, list[Interval]],
    predictions: list[dict],
    gts: dict[str, Interval],
    thresholds: tuple[float, ...] = (0.3, 0.5, 0.7),
    stability_pairs: list[tuple[float, float]] | None = None,
    drop_first_gap_bin: bool = False,
) -> MetricReport:
    retrieve_m, cited_m, refined_m = stagewise_diagnostics(pools, predictions, gts)
    per_query = []
    ious = []
    gaps = []
    for pred in predictions:
        gt = gts[pred["id"]]
        units = pools[pred["video"]]
        v = iou((pred["t_start"], pred["t_end"]), gt)
        gap = citation_gap(units, int(pred["cited_id"]), gt)
        ious.append(v)
        gaps.append(gap)
        per_query.append(
            QueryRecord(
                id=pred["id"],
                video=pred["video"],
                iou=v,
                retrieve_at_k=max(iou(t, gt) for t in units),
                cited_iou=iou(units[int(pred["cited_id"]) - 1], gt),
                citation_gap=gap,
            )
        )
    report = MetricReport(
        sample_count=len(ious),
        r_at={m: recall_at(ious, m) for m in thresholds},
        miou=mean_iou(ious),
        retrieve_at_k=retrieve_m,
        cited_miou=cited_m,
        refined_miou=refined_m,
        gap_fraction_below=sum(1 for g in gaps if g < GAP_THRESHOLD) / len(gaps),
        gap_histogram=histogram(gaps, drop_first_bin=drop_first_gap_bin),
        per_query=per_query,
        stability=stability_decompose(stability_pairs) if stability_pairs else None,
    )
    return report


def export_report(report: MetricReport, out_dir: str | Path) -> dict[str, Path]:
    """CSV summary, per-query JSONL, and histogram CSVs with stable layout."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out / "metrics.csv",
        "per_query": out / "per_query.jsonl",
        "gap_histogram": out / "citation_gap_histogram.csv",
    }
    with open(paths["summary"], "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in report.scalar_items():
            writer.writerow([name, repr(value)])
    with open(paths["per_query"], "w") as f:
        for q in report.per_query:
            f.write(
                json.dumps(
                    {
                        "id": q.id,
                        "video": q.video,
                        "iou": q.iou,
                        "retrieve_at_k": q.retrieve_at_k,
                        "cited_iou": q.cited_iou,
                        "citation_gap": q.citation_gap,
                    }
                )
                + "\n"
            )
    _write_histogram_csv(paths["gap_histogram"], report.gap_histogram)
    if report.stability is not None:
        paths["stability_mean_iou_hist"] = out / "stability_mean_iou_histogram.csv"
        paths["stability_delta_hist"] = out / "stability_abs_delta_histogram.csv"
        _write_histogram_csv(paths["stability_mean_iou_hist"], histogram(report.stability.mean_ious))
        _write_histogram_csv(paths["stability_delta_hist"], histogram(report.stability.abs_delta_ious))
    return paths


def _write_histogram_csv(path: Path, rows: list[tuple[float, float, int, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_left", "bin_right", "count", "density"])
        for left, right, count, density in rows:
            writer.writerow([repr(left), repr(right), count, repr(density)])


def read_report_scalars(path: str | Path) -> dict[str, float]:
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[row["metric"]] = float(row["value"])
    return out
