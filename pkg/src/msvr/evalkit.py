"""Distance ranking, CMC and mAP metrics, and evaluation reports.

Ranking is plain Euclidean distance with ties broken by gallery index, which
keeps degenerate-feature cases deterministic. CMC[k] is the fraction of
probes whose first true match appears within rank k; AP is the
interpolation-free area under each probe's precision-recall curve,
(1/R) * sum_j (j / r_j) over the true-match positions r_j, which supports
multi-shot galleries.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

PROBE = "probe"
GALLERY = "gallery"
REPORT_FORMAT = "eval-report/1"


class ProtocolError(ValueError):
    """The evaluation inputs violate the benchmark protocol."""


@dataclass
class FeatureSet:
    """Feature rows for probe and gallery images, with identity labels."""

    ids: list[int]
    features: np.ndarray  # (n, feature_dim)
    roles: list[str]
    views: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.ids):
            raise ValueError(
                f"features must be (n, d) with one row per id, got {self.features.shape} "
                f"for {len(self.ids)} ids"
            )
        if len(self.roles) != len(self.ids):
            raise ValueError("roles must align with ids")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    @classmethod
    def from_parts(cls, probe_ids, probe_features, gallery_ids, gallery_features,
                   probe_views=None, gallery_views=None) -> "FeatureSet":
        probe_features = np.asarray(probe_features, dtype=np.float64)
        gallery_features = np.asarray(gallery_features, dtype=np.float64)
        views: list[str] = []
        if probe_views is not None or gallery_views is not None:
            views = list(probe_views or [""] * len(probe_ids)) + list(
                gallery_views or [""] * len(gallery_ids)
            )
        return cls(
            ids=list(probe_ids) + list(gallery_ids),
            features=np.concatenate([probe_features, gallery_features], axis=0),
            roles=[PROBE] * len(probe_ids) + [GALLERY] * len(gallery_ids),
            views=views,
        )

    def part(self, role: str) -> tuple[list[int], np.ndarray, list[str]]:
        index = [i for i, r in enumerate(self.roles) if r == role]
        views = [self.views[i] for i in index] if self.views else ["" for _ in index]
        return [self.ids[i] for i in index], self.features[index], views


@dataclass
class EvalReport:
    cmc: list[float]  # ranks 1..K
    map: float
    per_probe: list[dict]
    n_probes: int
    n_gallery: int
    feature_dim: int
    n_excluded: int = 0

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    @property
    def rank5(self) -> float:
        return self.cmc[4] if len(self.cmc) >= 5 else self.cmc[-1]

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "cmc": self.cmc,
            "map": self.map,
            "rank1": self.rank1,
            "rank5": self.rank5,
            "per_probe": self.per_probe,
            "n_probes": self.n_probes,
            "n_gallery": self.n_gallery,
            "feature_dim": self.feature_dim,
            "n_excluded": self.n_excluded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT:
            raise ValueError(f"unsupported report format {d.get('format')!r}")
        return cls(
            cmc=[float(v) for v in d["cmc"]],
            map=float(d["map"]),
            per_probe=list(d["per_probe"]),
            n_probes=int(d["n_probes"]),
            n_gallery=int(d["n_gallery"]),
            feature_dim=int(d["feature_dim"]),
            n_excluded=int(d.get("n_excluded", 0)),
        )


# ---------------------------------------------------------------------------
# ranking and metrics

def l2_rank(probe_feature: np.ndarray, gallery_features: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance, ties by index."""
    probe_feature = np.asarray(probe_feature, dtype=np.float64)
    gallery_features = np.asarray(gallery_features, dtype=np.float64)
    if probe_feature.ndim != 1 or gallery_features.ndim != 2:
        raise ValueError(
            f"expected 1-D probe and 2-D gallery, got {probe_feature.shape} "
            f"and {gallery_features.shape}"
        )
    if gallery_features.shape[1] != probe_feature.shape[0]:
        raise ValueError(
            f"feature dimensions disagree: probe {probe_feature.shape[0]}, "
            f"gallery {gallery_features.shape[1]}"
        )
    diff = gallery_features - probe_feature[None, :]
    distances = np.sqrt(np.sum(diff * diff, axis=1))
    return np.argsort(distances, kind="stable")


def rank_all(probe_features: np.ndarray, gallery_features: np.ndarray) -> np.ndarray:
    """Row i holds the gallery ordering for probe i."""
    return np.stack([l2_rank(p, gallery_features) for p in np.asarray(probe_features)])


def cmc(
    rankings: Sequence[Sequence[int]],
    probe_ids: Sequence[int],
    gallery_ids: Sequence[int],
    max_rank: int,
) -> np.ndarray:
    """Cumulative fraction of probes whose first true match is at rank <= k."""
    gallery_ids = np.asarray(gallery_ids)
    first_ranks = []
    for order, pid in zip(rankings, probe_ids):
        hits = np.nonzero(gallery_ids[np.asarray(order)] == pid)[0]
        if hits.size == 0:
            raise ProtocolError(
                f"probe identity {pid} has no gallery image; single-shot construction violated"
            )
        first_ranks.append(hits[0] + 1)
    first_ranks = np.asarray(first_ranks)
    return np.array([(first_ranks <= k).mean() for k in range(1, max_rank + 1)])


def mean_ap(
    rankings: Sequence[Sequence[int]],
    probe_ids: Sequence[int],
    gallery_ids: Sequence[int],
) -> float:
    """Mean over probes of (1/R) * sum_j (j / r_j); multi-shot friendly.

    Probes without any true match are excluded with a logged warning.
    """
    gallery_ids = np.asarray(gallery_ids)
    aps = []
    excluded = 0
    for order, pid in zip(rankings, probe_ids):
        positions = np.nonzero(gallery_ids[np.asarray(order)] == pid)[0] + 1
        if positions.size == 0:
            excluded += 1
            continue
        ranks_of_hits = np.arange(1, positions.size + 1)
        aps.append(float(np.mean(ranks_of_hits / positions)))
    if excluded:
        log.warning("mean_ap: excluded %d probe(s) without any true match", excluded)
    if not aps:
        raise ProtocolError("every probe lacked a true match; nothing to average")
    return float(np.mean(aps))


def average_precision(hit_flags: Sequence[bool]) -> float:
    """AP of one ranked hit list; exposed for oracle cross-checks."""
    positions = np.nonzero(np.asarray(hit_flags, dtype=bool))[0] + 1
    if positions.size == 0:
        raise ProtocolError("no true match in ranking")
    return float(np.mean(np.arange(1, positions.size + 1) / positions))


def evaluate(
    features: FeatureSet,
    max_rank: int = 50,
    exclude_same_view: bool = False,
) -> EvalReport:
    """Rank every probe against the gallery and compute CMC, mAP, diagnostics.

    ``exclude_same_view`` drops gallery entries sharing both identity and
    view with the probe (the multi-shot convention for same-camera matches);
    the single-shot protocol here leaves it off because probe and gallery
    views are opposite by construction.
    """
    probe_ids, probe_features, probe_views = features.part(PROBE)
    gallery_ids, gallery_features, gallery_views = features.part(GALLERY)
    if not probe_ids or not gallery_ids:
        raise ProtocolError("need both probe and gallery rows to evaluate")

    gallery_id_arr = np.asarray(gallery_ids)
    per_probe = []
    all_first = []
    aps = []
    excluded = 0
    for i, (pid, pfeat) in enumerate(zip(probe_ids, probe_features)):
        order = l2_rank(pfeat, gallery_features)
        if exclude_same_view and probe_views[i]:
            keep = [
                j
                for j in order
                if not (gallery_id_arr[j] == pid and gallery_views[j] == probe_views[i])
            ]
            order = np.asarray(keep, dtype=np.intp)
        ranked_ids = gallery_id_arr[order]
        positions = np.nonzero(ranked_ids == pid)[0] + 1
        if positions.size == 0:
            excluded += 1
            log.warning("probe %d (identity %d) has no true match after filtering", i, pid)
            continue
        first = int(positions[0])
        all_first.append(first)
        aps.append(float(np.mean(np.arange(1, positions.size + 1) / positions)))
        per_probe.append(
            {
                "probe_index": i,
                "identity": int(pid),
                "first_match_rank": first,
                "top5_gallery_ids": [int(v) for v in ranked_ids[:5]],
            }
        )
    if not all_first:
        raise ProtocolError("every probe lacked a true match; nothing to evaluate")

    first_arr = np.asarray(all_first)
    curve = [float((first_arr <= k).mean()) for k in range(1, max_rank + 1)]
    return EvalReport(
        cmc=curve,
        map=float(np.mean(aps)),
        per_probe=per_probe,
        n_probes=len(probe_ids),
        n_gallery=len(gallery_ids),
        feature_dim=int(features.features.shape[1]),
        n_excluded=excluded,
    )


# ---------------------------------------------------------------------------
# report emission

def write_report_json(report: EvalReport, path, meta: dict | None = None) -> None:
    payload = report.to_dict()
    payload["meta"] = dict(meta or {})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_report_json(path) -> tuple[EvalReport, dict]:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    meta = payload.pop("meta", {})
    return EvalReport.from_dict(payload), meta


def write_cmc_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "cmc"])
        for k, value in enumerate(report.cmc, start=1):
            writer.writerow([k, repr(value)])


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Rank-1 / Rank-5 / mAP table, one row per named report."""
    name_width = max(len("Method"), *(len(name) for name, _ in rows)) if rows else 6
    header = f"{'Method':<{name_width}}  Rank-1  Rank-5     mAP"
    lines = [header, "-" * len(header)]
    for name, report in rows:
        lines.append(
            f"{name:<{name_width}}  {100 * report.rank1:6.2f}  {100 * report.rank5:6.2f}  "
            f"{100 * report.map:6.2f}"
        )
    return "\n".join(lines)
