"""Single-center and two-center experiment protocols on the synthetic centers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from .data import Dataset, default_center_specs, generate_center, make_semi_split, split_dataset, strip_masks
from .errors import ConfigError, DataError
from .metrics import MetricsReport, evaluate_model
from .training import TrainingConfig, TrainingResult, run_training

log = logging.getLogger(__name__)

PROTOCOLS = ("single-center", "two-center")


@dataclass
class Protocol:
    labeled: Dataset
    unlabeled: Dataset
    val: Dataset
    test: Dataset


def single_center(c1: Dataset, labeled_ratio: float, seed: int = 0, n_val: int = 10, n_test: int = 20) -> Protocol:
    """Train/val/test split of one center; the unlabeled part of the training
    split keeps its images only."""
    if not c1.has_masks:
        raise DataError("single-center protocol needs a fully labeled dataset")
    train, val, test = split_dataset(c1, n_val, n_test, seed)
    lab, unl = make_semi_split(train, labeled_ratio, seed)
    return Protocol(lab, unl, val, test)


def two_center(
    c1: Dataset,
    c2: Dataset,
    labeled_ratio: float = 1.0,
    seed: int = 0,
    n_train: int = 100,
    n_val: int = 10,
    n_test: int = 20,
) -> Protocol:
    """Labeled C1 (plus a C1 validation split for early stopping), unlabeled C2,
    and a held-out labeled C2 test split."""
    if len(c1) < n_train + n_val:
        raise DataError(f"C1 has {len(c1)} cases; need {n_train} train + {n_val} val")
    c1_train, c1_val, _ = split_dataset(c1, n_val, len(c1) - n_train - n_val, seed)
    lab, _ = make_semi_split(c1_train, labeled_ratio, seed)
    c2_unl, _, c2_test = split_dataset(c2, 0, n_test, seed)
    if not c2_test.has_masks:
        raise DataError("C2 test split needs masks")
    return Protocol(lab, strip_masks(c2_unl), c1_val, c2_test)


def default_protocol(kind: str, seed: int = 0, labeled_ratio: float | None = None) -> Protocol:
    """Generate the default synthetic centers for ``seed`` and split them."""
    if kind not in PROTOCOLS:
        raise ConfigError(f"mode must be one of {PROTOCOLS}, got {kind!r}")
    specs = default_center_specs(seed=100 + seed)
    c1 = generate_center(specs["C1"])
    if kind == "single-center":
        return single_center(c1, 0.5 if labeled_ratio is None else labeled_ratio, seed)
    c2 = generate_center(specs["C2"])
    return two_center(c1, c2, 1.0 if labeled_ratio is None else labeled_ratio, seed)


@dataclass
class RunOutcome:
    mode: str
    seed: int
    result: TrainingResult
    report: MetricsReport

    @property
    def dice(self) -> float:
        return self.report.summary()["dice"]["mean"]


def run_protocol(proto: Protocol, cfg: TrainingConfig) -> RunOutcome:
    res = run_training(cfg, proto.labeled, proto.unlabeled, proto.val)
    rep = evaluate_model(res.state, proto.test)
    log.info("%s seed=%d best_epoch=%d test dice=%.4f", cfg.ablation_mode, cfg.seed, res.best_epoch,
             rep.summary()["dice"]["mean"])
    return RunOutcome(cfg.ablation_mode, cfg.seed, res, rep)


def run_mode(kind: str, mode: str, seed: int, base: TrainingConfig | None = None, **overrides) -> RunOutcome:
    base = base or benchmark_config(kind)
    cfg = replace(base, ablation_mode=mode, seed=seed, **overrides)
    return run_protocol(default_protocol(kind, seed), cfg)


def benchmark_config(kind: str = "single-center") -> TrainingConfig:
    """Training defaults used by the benchmark runs: engine defaults except a
    faster segmentation learning rate, which converges within the epoch budget.
    Two-center epochs are fewer because each has ~2x the steps."""
    if kind not in PROTOCOLS:
        raise ConfigError(f"mode must be one of {PROTOCOLS}, got {kind!r}")
    return TrainingConfig(lr_smrm=1e-3, epochs=30 if kind == "single-center" else 20)
