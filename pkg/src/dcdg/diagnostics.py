"""Adaptation-equilibrium tracking (MIL/MIU) and pooled-feature export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, batches
from .errors import ArtifactIOError, DataError, DomainError
from .networks import ModelState, fg_forward


@dataclass
class AdaptationHistory:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def mil(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def miu(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @classmethod
    def from_logs(cls, logs) -> "AdaptationHistory":
        """Build from epoch logs, skipping epochs without an adaptation phase."""
        h = cls()
        for rec in logs:
            if np.isfinite(rec.MIL) and np.isfinite(rec.MIU):
                h.rows.append((rec.epoch, float(rec.MIL), float(rec.MIU)))
        return h

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "MIL", "MIU"])
            for e, l, u in self.rows:
                w.writerow([e, repr(l), repr(u)])


def record(epoch: int, scores_l, scores_u, history: AdaptationHistory | None = None) -> AdaptationHistory:
    """Append (epoch, mean labeled score, mean unlabeled score)."""
    history = history if history is not None else AdaptationHistory()
    sl = torch.as_tensor(scores_l, dtype=torch.float64).detach().numpy().ravel()
    su = torch.as_tensor(scores_u, dtype=torch.float64).detach().numpy().ravel()
    if sl.size == 0 or su.size == 0:
        raise DataError("record needs non-empty score arrays")
    if np.any((sl <= 0) | (sl >= 1)) or np.any((su <= 0) | (su >= 1)):
        raise DomainError("discriminator scores must lie in (0, 1)")
    if history.rows and epoch <= history.rows[-1][0]:
        raise DataError(f"epoch {epoch} does not follow last recorded epoch {history.rows[-1][0]}")
    history.rows.append((epoch, float(sl.mean()), float(su.mean())))
    return history


def equilibrium_summary(history: AdaptationHistory, window: int = 10) -> tuple[float, float]:
    """(mean |MIL + MIU - 1|, mean |MIL - MIU|) over the last ``window`` epochs.
    Both are 0 at the ideal 0.5/0.5 equilibrium."""
    if window < 1 or window > len(history):
        raise DataError(f"window {window} not in [1, {len(history)}]")
    mil, miu = history.mil[-window:], history.miu[-window:]
    return float(np.mean(np.abs(mil + miu - 1))), float(np.mean(np.abs(mil - miu)))


def agreement_limits(history: AdaptationHistory, window: int = 10) -> dict[str, tuple[float, float]]:
    """Empirical 2.5/97.5 percentiles of MIL-MIU and MIL+MIU over the window."""
    if window < 1 or window > len(history):
        raise DataError(f"window {window} not in [1, {len(history)}]")
    mil, miu = history.mil[-window:], history.miu[-window:]
    out = {}
    for name, v in (("diff", mil - miu), ("sum", mil + miu)):
        lo, hi = np.percentile(v, [2.5, 97.5])
        out[name] = (float(lo), float(hi))
    return out


@torch.no_grad()
def pooled_features(state: ModelState, ds: Dataset, batch_size: int = 32) -> np.ndarray:
    """Global-average-pooled generator features, one row per case."""
    rows = []
    for img, _ in batches(ds, batch_size):
        rows.append(fg_forward(state, img).mean(dim=(2, 3)).numpy().astype(np.float64))
    return np.concatenate(rows)


def features_csv(state: ModelState, ds: Dataset) -> str:
    if len(ds) == 0:
        raise DataError("cannot export features of an empty dataset")
    feats = pooled_features(state, ds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", "center_id", *[f"f{i}" for i in range(feats.shape[1])]])
    for c, row in zip(ds, feats):
        w.writerow([c.case_id, c.center_id, *[repr(float(v)) for v in row]])
    return buf.getvalue()


def export_features(state: ModelState, ds: Dataset, out_path) -> Path:
    text = features_csv(state, ds)
    out_path = Path(out_path)
    try:
        out_path.write_text(text)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {out_path}: {exc}") from exc
    return out_path


def center_centroid_distance(state: ModelState, ds: Dataset) -> float:
    """Euclidean distance between the per-center centroids of pooled features
    (mean over center pairs when there are more than two)."""
    feats = pooled_features(state, ds)
    centers = np.array([c.center_id for c in ds])
    ids = sorted(set(centers))
    if len(ids) < 2:
        raise DataError("need cases from at least two centers")
    cents = [feats[centers == c].mean(axis=0) for c in ids]
    d = [np.linalg.norm(cents[i] - cents[j]) for i in range(len(ids)) for j in range(i + 1, len(ids))]
    return float(np.mean(d))
