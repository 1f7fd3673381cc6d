"""Popularity-debiased ranking metrics and evaluation drivers.

Recall@K and NDCG@K weight each test video by the inverse training-set
popularity of its ground-truth clip, normalized over the evaluated videos:

    weight_v = (1 / pop(m_v)) / sum_i (1 / pop(m_i))

With a single relevant clip per video and binary gains, the ideal DCG is 1,
so the NDCG contribution of a hit at rank r is 1 / log2(r + 1). Sums use
math.fsum, which makes both metrics exactly invariant to video iteration
order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .datamodel import Dataset, music_popularity_table
from .synthgen import (
    GroundTruth,
    GroundTruthUnavailableError,
    SplitSpec,
    materialize_split,
    sample_diverse_test,
    sample_matching_test,
)
from .student import RankingResult

CSV_COLUMNS = ("run_id", "config_hash", "seed", "split", "sampler", "metric", "K", "value")


@dataclass(frozen=True)
class SamplerSpec:
    """How to pick the evaluated videos out of the test split."""

    kind: str = "all"  # all | diverse | matching
    fraction: float = 1.0
    ground_truth: GroundTruth | None = None

    def label(self) -> str:
        if self.kind == "all":
            return "all"
        return f"{self.kind}_{self.fraction:g}"


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    config_hash: str
    seed: int
    split: str
    sampler: str
    metric: str
    K: int
    value: float

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"metric value {self.value} outside [0, 1]")


@dataclass
class MetricsReport:
    """Evaluation rows plus free-form run metadata."""

    rows: tuple[MetricRow, ...]
    meta: dict = field(default_factory=dict)

    def value(self, metric: str, K: int, **filters) -> float:
        hits = [
            r.value
            for r in self.rows
            if r.metric == metric
            and r.K == K
            and all(getattr(r, k) == v for k, v in filters.items())
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match metric={metric} K={K} {filters}")
        return hits[0]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in sorted(
            self.rows, key=lambda r: (r.run_id, r.seed, r.split, r.sampler, r.metric, r.K)
        ):
            writer.writerow(
                [r.run_id, r.config_hash, r.seed, r.split, r.sampler, r.metric, r.K, repr(r.value)]
            )
        return buf.getvalue()

    def save_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "MetricsReport":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    MetricRow(
                        run_id=rec["run_id"],
                        config_hash=rec["config_hash"],
                        seed=int(rec["seed"]),
                        split=rec["split"],
                        sampler=rec["sampler"],
                        metric=rec["metric"],
                        K=int(rec["K"]),
                        value=float(rec["value"]),
                    )
                )
        return cls(rows=tuple(rows))

    @classmethod
    def merge(cls, reports) -> "MetricsReport":
        rows = tuple(r for rep in reports for r in rep.rows)
        return cls(rows=rows)


def video_weight(video_ids, gt_clip: dict, popularity: dict) -> dict:
    """Inverse-popularity weights, normalized to sum 1 over ``video_ids``.

    A clip missing from the popularity table counts 1 (unseen under strong
    generalization); a clip explicitly recorded at zero popularity is an
    error since its weight is undefined.
    """
    if not video_ids:
        raise ValueError("no videos to weight")
    inv = {}
    for vid in video_ids:
        clip = gt_clip[vid]
        pop = popularity.get(clip, 1)
        if pop == 0:
            raise ValueError(f"music clip {clip!r} has zero popularity in the reference population")
        inv[vid] = 1.0 / pop
    norm = math.fsum(inv.values())
    return {vid: w / norm for vid, w in inv.items()}


def recall_at_k(rankings: dict, gt_clip: dict, weights: dict, K: int) -> float:
    """Weighted hit ratio: sum of weights of videos whose clip is in top-K."""
    terms = []
    for vid, weight in weights.items():
        if vid not in rankings:
            raise KeyError(f"missing ranking for test video {vid!r}")
        pos = rankings[vid].position_of(gt_clip[vid])
        terms.append(weight if pos is not None and pos <= K else 0.0)
    return math.fsum(terms)


def ndcg_at_k(rankings: dict, gt_clip: dict, weights: dict, K: int) -> float:
    """Weighted position-discounted gain; a hit at rank r earns 1/log2(r+1)."""
    terms = []
    for vid, weight in weights.items():
        if vid not in rankings:
            raise KeyError(f"missing ranking for test video {vid!r}")
        pos = rankings[vid].position_of(gt_clip[vid])
        if pos is not None and pos <= K:
            terms.append(weight / math.log2(pos + 1))
        else:
            terms.append(0.0)
    return math.fsum(terms)


def select_test_videos(dataset: Dataset, test_view: Dataset, sampler: SamplerSpec) -> tuple[str, ...]:
    """Apply a sampler to the test split's videos.

    Diverse sampling ranks by uploader history entropy over the full
    dataset; matching sampling needs generator ground truth.
    """
    eligible = sorted(test_view.video_by_id)
    if sampler.kind == "all":
        return tuple(eligible)
    if sampler.kind == "diverse":
        return sample_diverse_test(dataset, sampler.fraction, eligible=eligible)
    if sampler.kind == "matching":
        if sampler.ground_truth is None:
            raise GroundTruthUnavailableError("matching sampler needs generator ground truth")
        return sample_matching_test(test_view, sampler.ground_truth, sampler.fraction, eligible=eligible)
    raise ValueError(f"unknown sampler kind {sampler.kind!r}")


def evaluate(
    model,
    dataset: Dataset,
    split: SplitSpec,
    sampler: SamplerSpec = SamplerSpec(),
    Ks: tuple[int, ...] = (15, 25),
    seed: int = 0,
    run_id: str = "run",
    config_hash: str = "",
) -> MetricsReport:
    """Rank the full test-split pool per test video and score both metrics.

    ``model`` must expose ``rank(video_feature, pool, K, video_id)``. Weights
    come from training-split popularity. Rows carry the run metadata columns
    used by the CSV interface.
    """
    train_view = materialize_split(dataset, split, "train")
    test_view = materialize_split(dataset, split, "test")
    if not test_view.interactions:
        raise ValueError("empty test set")
    popularity = music_popularity_table(train_view)

    gt_clip: dict[str, str] = {}
    for t in test_view.interactions:
        gt_clip.setdefault(t.video_id, t.music_id)

    videos = select_test_videos(dataset, test_view, sampler)
    pool = sorted(test_view.music, key=lambda m: m.music_id)
    weights = video_weight(videos, gt_clip, popularity)

    max_k = max(Ks)
    rankings = {
        vid: model.rank(test_view.video_by_id[vid].feature, pool, max_k, video_id=vid)
        for vid in videos
    }

    split_label = split.meta.get("method", "split")
    if "X" in split.meta:
        split_label = f"{split_label}_X{split.meta['X']:g}"
    rows = []
    for K in Ks:
        rows.append(
            MetricRow(run_id, config_hash, seed, split_label, sampler.label(), "recall", K,
                      recall_at_k(rankings, gt_clip, weights, K))
        )
        rows.append(
            MetricRow(run_id, config_hash, seed, split_label, sampler.label(), "ndcg", K,
                      ndcg_at_k(rankings, gt_clip, weights, K))
        )
    return MetricsReport(
        rows=tuple(rows),
        meta={
            "run_id": run_id,
            "config_hash": config_hash,
            "seed": seed,
            "n_test_videos": len(videos),
            "pool_size": len(pool),
            **{k: v for k, v in split.meta.items() if k in ("method", "X")},
        },
    )
