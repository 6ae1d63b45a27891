"""Region and surface metrics: Dice, IoU and mean surface distance (MSD)."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArtifactIOError, DataError, ShapeError, UndefinedMetric

log = logging.getLogger(__name__)

METRICS = ("dice", "iou", "msd")


def _arr(m) -> np.ndarray:
    m = getattr(m, "data", m)
    if hasattr(m, "detach"):
        m = m.detach().cpu().numpy()
    return np.asarray(m)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    return (_arr(probs) >= threshold).astype(np.uint8)


def _pair(p, g) -> tuple[np.ndarray, np.ndarray]:
    p, g = _arr(p).astype(bool), _arr(g).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(p, g) -> float:
    p, g = _pair(p, g)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(p, g) -> float:
    p, g = _pair(p, g)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def _as_2d(mask) -> np.ndarray:
    m = _arr(mask).astype(bool)
    m = np.squeeze(m)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim == 1:
        m = m[None]
    if m.ndim != 2:
        raise ShapeError(f"surface extraction expects one 2D mask, got shape {_arr(mask).shape}")
    return m


def extract_surface(mask) -> np.ndarray:
    """(row, col) coordinates of foreground pixels that touch background or
    the image border through a 4-neighbour."""
    m = _as_2d(mask)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return np.argwhere(m & ~interior)


def msd(p, g, spacing: tuple[float, float] = (1.0, 1.0)) -> float:
    sp = extract_surface(p) * np.asarray(spacing, dtype=np.float64)
    sg = extract_surface(g) * np.asarray(spacing, dtype=np.float64)
    if len(sp) == 0 or len(sg) == 0:
        raise UndefinedMetric("MSD undefined: empty surface in prediction or ground truth")
    d_pg = cKDTree(sg).query(sp)[0].mean()
    d_gp = cKDTree(sp).query(sg)[0].mean()
    return 0.5 * (float(d_pg) + float(d_gp))


@dataclass
class CaseMetrics:
    case_id: str
    dice: float
    iou: float
    msd: float | None  # None when undefined


def case_metrics(case_id: str, p, g, spacing=(1.0, 1.0)) -> CaseMetrics:
    try:
        m = msd(p, g, spacing)
    except UndefinedMetric:
        log.warning("case %s: MSD undefined (empty surface), excluded from aggregates", case_id)
        m = None
    return CaseMetrics(case_id, dice(p, g), iou(p, g), m)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    if len(values) == 1:
        return float(values[0]), 0.0
    return float(np.mean(values)), float(np.std(values, ddof=1))


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    def values(self, metric: str) -> list[float]:
        return [getattr(c, metric) for c in self.cases if getattr(c, metric) is not None]

    def summary(self) -> dict:
        out = {}
        for m in METRICS:
            vals = self.values(m)
            mean, std = _mean_std(vals)
            out[m] = {"mean": mean, "std": std, "n": len(vals)}
        out["n_cases"] = self.n_cases
        return out

    def write_csv(self, path) -> None:
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["case_id", *METRICS])
                for c in self.cases:
                    w.writerow([c.case_id, repr(c.dice), repr(c.iou), "" if c.msd is None else repr(c.msd)])
        except OSError as exc:
            raise ArtifactIOError(f"cannot write {path}: {exc}") from exc

    def write_json(self, path) -> None:
        try:
            Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise ArtifactIOError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(CaseMetrics(r["case_id"], float(r["dice"]), float(r["iou"]),
                                        float(r["msd"]) if r["msd"] else None))
        return cls(rows)


def evaluate_predictions(ds, preds, spacing=(1.0, 1.0)) -> MetricsReport:
    if len(ds) == 0:
        raise DataError("test set is empty")
    if not ds.has_masks:
        raise DataError("every test case needs a ground-truth mask")
    return MetricsReport([case_metrics(c.case_id, p, c.mask, spacing) for c, p in zip(ds, preds)])


def evaluate_model(state, test, threshold: float = 0.5, spacing=(1.0, 1.0)) -> MetricsReport:
    """Per-case metrics for FG -> SM -> binarize on every test case."""
    from .training import predict

    if len(test) == 0:
        raise DataError("test set is empty")
    return evaluate_predictions(test, binarize(predict(state, test), threshold), spacing)

