"""Alternating training schedule.

Each epoch runs a full pass of adaptation steps (discriminator update, then
generator update, segmentation model frozen) followed by a full pass of
segmentation steps (segmentation model and reverse mapper only).
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses
from .data import Dataset, batches
from .errors import ConfigError, ContractViolation, DataError, TrainingAbort
from .losses import LossWeights
from .metrics import binarize, dice
from .networks import ArchConfig, ModelState, d_forward, fg_forward, init_model, rm_forward, sm_forward

log = logging.getLogger(__name__)

MODES = ("DCDG", "SDA", "WDA", "WFM", "DDDA", "FSS")
LOG_COLUMNS = ("epoch", "L_d", "L_adv", "L_fm", "L_seg", "MIL", "MIU", "val_dice")


@dataclass(frozen=True)
class TrainingConfig:
    labeled_ratio: float = 0.5
    ablation_mode: str = "DCDG"
    epochs: int = 30
    batch_size: int = 8
    lr_d: float = 2e-4
    lr_fg: float = 2e-4
    lr_smrm: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = LossWeights()
    early_stop_patience: int = 10
    seed: int = 0
    # also let the Dice term train the feature generator (off by default)
    fg_in_seg: bool = False
    check_freeze: bool = True
    arch: ArchConfig = ArchConfig()

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", ArchConfig.from_dict(self.arch))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.ablation_mode not in MODES:
            raise ConfigError(f"ablation_mode must be one of {MODES}, got {self.ablation_mode!r}")
        if not (isinstance(self.labeled_ratio, (int, float)) and 0.0 < self.labeled_ratio <= 1.0):
            raise ConfigError(f"labeled_ratio must be in (0, 1], got {self.labeled_ratio!r}")
        for name in ("lr_d", "lr_fg", "lr_smrm"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be finite and > 0, got {v!r}")
        for name in ("epochs", "batch_size", "early_stop_patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        want_disc = "features" if self.ablation_mode == "DDDA" else "probs"
        if self.arch.disc_input != want_disc:
            object.__setattr__(self, "arch", replace(self.arch, disc_input=want_disc))

    @property
    def adapts(self) -> bool:
        return self.ablation_mode not in ("WDA", "FSS")

    def effective_weights(self) -> LossWeights:
        if self.ablation_mode == "WFM":
            return replace(self.weights, fm=0.0)
        return self.weights

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainingConfig field(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "TrainingConfig":
        text = Path(path).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(d)


@dataclass
class EpochLog:
    epoch: int
    L_d: float = 0.0
    L_adv: float = 0.0
    L_fm: float = 0.0
    L_seg: float = 0.0
    MIL: float = float("nan")
    MIU: float = float("nan")
    val_dice: float = float("nan")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in LOG_COLUMNS}


# -- optimizer plumbing -----------------------------------------------------

def ensure_optimizers(state: ModelState, cfg: TrainingConfig) -> None:
    """Create the three Adam optimizers on first use; afterwards only sync
    learning rates so restored moment estimates are kept."""
    groups = {
        "d": (list(state.d.parameters()), cfg.lr_d),
        "fg": (list(state.fg.parameters()), cfg.lr_fg),
        "smrm": (list(state.sm.parameters()) + list(state.rm.parameters()), cfg.lr_smrm),
    }
    for name, (params, lr) in groups.items():
        opt = state.optimizers.get(name)
        if opt is None:
            state.optimizers[name] = torch.optim.Adam(params, lr=lr, betas=cfg.betas)
        else:
            for g in opt.param_groups:
                g["lr"] = lr
                g["betas"] = cfg.betas


class _Frozen:
    """Context manager: disables grads on ``groups`` and, when ``check`` is
    set, asserts on exit that their arrays are bit-identical."""

    def __init__(self, state: ModelState, groups, where: str, check: bool = True):
        self.state, self.groups, self.where, self.check = state, tuple(groups), where, check

    def __enter__(self):
        self.before = self.state.snapshot(self.groups) if self.check else None
        self.flags = []
        for p in self.state.parameters(self.groups):
            self.flags.append(p.requires_grad)
            p.requires_grad_(False)
        return self

    def __exit__(self, *exc):
        for p, f in zip(self.state.parameters(self.groups), self.flags):
            p.requires_grad_(f)
        if exc[0] is None and self.check:
            after = self.state.snapshot(self.groups)
            drift = [k for k, v in self.before.items() if not torch.equal(v, after[k])]
            if drift:
                raise ContractViolation(f"{self.where}: frozen arrays changed: {drift[:5]}")
        return False


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    opt.zero_grad(set_to_none=True)


def _x(b) -> torch.Tensor:
    return b.data if hasattr(b, "data") and not isinstance(b, torch.Tensor) else b


# -- steps ------------------------------------------------------------------

def discriminator_objective(state: ModelState, xl, xu, cfg: TrainingConfig):
    """Discriminator-side objective (L_d + w_fm * L_fm) with generator features
    treated as constants. Returns (total, L_d, L_fm)."""
    mode = cfg.ablation_mode
    with torch.no_grad():
        f_l, f_u = fg_forward(state, xl), fg_forward(state, xu)
        if mode != "DDDA":
            p_l, p_u = sm_forward(state, f_l), sm_forward(state, f_u)
    if mode == "DDDA":
        out_l, out_u = d_forward(state, f_l), d_forward(state, f_u)
        l_fm = torch.zeros(())
    else:
        out_l, out_u = d_forward(state, p_l), d_forward(state, p_u)
        l_fm = losses.feature_match_loss(f_l, out_l.features, f_u, out_u.features)
    l_d = losses.discriminator_loss(out_l.score, out_u.score)
    return l_d + cfg.effective_weights().fm * l_fm, l_d, l_fm


def generator_objective(state: ModelState, xl, xu, cfg: TrainingConfig):
    """Generator-side objective. Returns (total, L_adv, L_fm, score_l, score_u)."""
    mode = cfg.ablation_mode
    f_l, f_u = fg_forward(state, xl), fg_forward(state, xu)
    l_fm = torch.zeros(())
    if mode == "DDDA":
        out_l, out_u = d_forward(state, f_l), d_forward(state, f_u)
        # without a tap, matching acts on batch-mean features of the two sides
        l_fm = ((f_l.mean(0) - f_u.mean(0)) ** 2).mean()
    else:
        out_l = d_forward(state, sm_forward(state, f_l))
        out_u = d_forward(state, sm_forward(state, f_u))
    if mode == "SDA":
        l_adv = losses.single_sided_adversarial_loss(out_u.score)
    else:
        l_adv = losses.adversarial_loss(out_l.score, out_u.score)
    total = l_adv + cfg.effective_weights().fm * l_fm
    return total, l_adv, l_fm, out_l.score.detach(), out_u.score.detach()


def adaptation_step(state: ModelState, batch_l, batch_u, cfg: TrainingConfig) -> tuple[ModelState, dict]:
    if not cfg.adapts:
        raise ConfigError(f"adaptation_step is not defined for mode {cfg.ablation_mode}")
    ensure_optimizers(state, cfg)
    xl, xu = _x(batch_l), _x(batch_u)
    if xl.shape[-2:] != xu.shape[-2:]:
        raise DataError(f"labeled/unlabeled spatial sizes differ: {tuple(xl.shape)} vs {tuple(xu.shape)}")
    check = cfg.check_freeze
    with _Frozen(state, ("sm", "rm"), "adaptation step", check):
        with _Frozen(state, ("fg",), "discriminator sub-step", check):
            total_d, l_d, l_fm_d = discriminator_objective(state, xl, xu, cfg)
            _step(state.optimizers["d"], total_d)
        with _Frozen(state, ("d",), "generator sub-step", check):
            total_g, l_adv, l_fm_g, s_l, s_u = generator_objective(state, xl, xu, cfg)
            _step(state.optimizers["fg"], total_g)
    l_fm = l_fm_g if cfg.ablation_mode == "DDDA" else l_fm_d
    if cfg.ablation_mode == "WFM":
        l_fm = torch.zeros(())
    return state, {
        "L_d": float(l_d.detach()),
        "L_adv": float(l_adv.detach()),
        "L_fm": float(l_fm.detach()),
        "MIL": float(s_l.mean()),
        "MIU": float(s_u.mean()),
    }


def _reconstruct(state: ModelState, f: torch.Tensor, p: torch.Tensor, cfg: TrainingConfig) -> torch.Tensor:
    if cfg.ablation_mode == "DDDA":
        return rm_forward(state, f)
    return rm_forward(state, d_forward(state, p).features)


def segmentation_loss(state: ModelState, lx, ly, ux, cfg: TrainingConfig) -> torch.Tensor:
    with torch.set_grad_enabled(cfg.fg_in_seg and torch.is_grad_enabled()):
        f_l = fg_forward(state, lx)
        f_u = fg_forward(state, ux) if ux is not None else None
    if f_u is not None and not cfg.fg_in_seg:
        f_u = f_u.detach()
    lp = sm_forward(state, f_l)
    lx_rec = _reconstruct(state, f_l, lp, cfg)
    ux_rec = None
    if ux is not None:
        ux_rec = _reconstruct(state, f_u, sm_forward(state, f_u), cfg)
    return losses.segmentation_objective(lx, ly, lx_rec, lp, ux, ux_rec, cfg.weights)


def segmentation_step(state: ModelState, batch_l, batch_u, cfg: TrainingConfig) -> tuple[ModelState, dict]:
    """``batch_l`` is (images, masks). ``batch_u`` may be None (FSS or no
    unlabeled pool); in FSS mode it is ignored."""
    ensure_optimizers(state, cfg)
    lx, ly = (_x(b) for b in batch_l)
    ux = None if (batch_u is None or cfg.ablation_mode == "FSS") else _x(batch_u)
    frozen = ("d",) if cfg.fg_in_seg else ("fg", "d")
    with _Frozen(state, frozen, "segmentation step", cfg.check_freeze):
        loss = segmentation_loss(state, lx, ly, ux, cfg)
        if cfg.fg_in_seg:
            state.optimizers["fg"].zero_grad(set_to_none=True)
            _step(state.optimizers["smrm"], loss)
            state.optimizers["fg"].step()
            state.optimizers["fg"].zero_grad(set_to_none=True)
        else:
            _step(state.optimizers["smrm"], loss)
    return state, {"L_seg": float(loss.detach())}


# -- epochs -----------------------------------------------------------------

def pair_indices(n_l: int, n_u: int) -> list[tuple[int, int]]:
    """Pair labeled and unlabeled batch indices, cycling the shorter pool."""
    n = max(n_l, n_u)
    return [(i % n_l, i % n_u) for i in range(n)]


def _check_finite(values: dict, epoch: int, phase: str) -> None:
    for k, v in values.items():
        if not math.isfinite(v):
            raise TrainingAbort(f"non-finite {k} = {v} in {phase} during epoch {epoch}")


def train_epoch(
    state: ModelState,
    labeled: Dataset,
    unlabeled: Dataset,
    cfg: TrainingConfig,
    on_step: Callable[[str, int], None] | None = None,
) -> tuple[ModelState, EpochLog]:
    if len(labeled) == 0:
        raise DataError("labeled training set is empty")
    mode = cfg.ablation_mode
    if len(unlabeled) == 0 and mode != "FSS":
        raise DataError(f"unlabeled set is empty; mode {mode} needs unlabeled data (use FSS)")
    epoch = state.epoch + 1
    rng = np.random.default_rng([cfg.seed, epoch])
    lb = list(batches(labeled, cfg.batch_size, rng))
    ub = list(batches(unlabeled, cfg.batch_size, rng)) if mode != "FSS" else []
    acc: dict[str, list[float]] = {k: [] for k in ("L_d", "L_adv", "L_fm", "MIL", "MIU", "L_seg")}

    if cfg.adapts:
        for i, (il, iu) in enumerate(pair_indices(len(lb), len(ub))):
            if on_step:
                on_step("adapt", i)
            state, out = adaptation_step(state, lb[il][0], ub[iu][0], cfg)
            _check_finite(out, epoch, "adaptation")
            for k, v in out.items():
                acc[k].append(v)

    pairs = pair_indices(len(lb), len(ub)) if ub else [(i, None) for i in range(len(lb))]
    for i, (il, iu) in enumerate(pairs):
        if on_step:
            on_step("seg", i)
        img, mask = lb[il]
        state, out = segmentation_step(state, (img, mask), ub[iu][0] if iu is not None else None, cfg)
        _check_finite(out, epoch, "segmentation")
        acc["L_seg"].append(out["L_seg"])

    state.epoch = epoch
    mean = {k: (float(np.mean(v)) if v else None) for k, v in acc.items()}
    rec = EpochLog(
        epoch=epoch,
        L_d=mean["L_d"] or 0.0,
        L_adv=mean["L_adv"] or 0.0,
        L_fm=mean["L_fm"] or 0.0,
        L_seg=mean["L_seg"] or 0.0,
        MIL=mean["MIL"] if mean["MIL"] is not None else float("nan"),
        MIU=mean["MIU"] if mean["MIU"] is not None else float("nan"),
    )
    return state, rec


@torch.no_grad()
def predict(state: ModelState, ds: Dataset, batch_size: int = 32) -> np.ndarray:
    out = []
    for img, _ in batches(ds, batch_size):
        out.append(sm_forward(state, fg_forward(state, img)).numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def mean_dice(state: ModelState, ds: Dataset) -> float:
    probs = predict(state, ds)
    masks = np.stack([c.mask for c in ds])
    pred = binarize(probs)
    return float(np.mean([dice(p, g) for p, g in zip(pred, masks)]))


@dataclass
class TrainingResult:
    state: ModelState
    logs: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0


def run_training(
    cfg: TrainingConfig,
    train_labeled: Dataset,
    train_unlabeled: Dataset,
    val_set: Dataset,
    state: ModelState | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
    val_metric: Callable[[ModelState, Dataset], float] | None = None,
) -> TrainingResult:
    """Train with early stopping on validation Dice; return the best state.

    ``val_metric`` replaces the default mean validation Dice.
    """
    val_metric = val_metric or mean_dice
    if len(val_set) == 0 or not val_set.has_masks:
        raise DataError("validation set must be non-empty and fully labeled")
    if cfg.ablation_mode == "FSS":
        train_unlabeled = Dataset([])
    state = state or init_model(cfg.arch, cfg.seed)
    best_state, best_dice, best_epoch, stale = copy.deepcopy(state), -1.0, 0, 0
    logs: list[EpochLog] = []
    for _ in range(cfg.epochs):
        state, rec = train_epoch(state, train_labeled, train_unlabeled, cfg)
        rec.val_dice = float(val_metric(state, val_set))
        logs.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d L_d=%.4f L_adv=%.4f L_fm=%.4f L_seg=%.4f MIL=%.3f MIU=%.3f val_dice=%.4f",
                 rec.epoch, rec.L_d, rec.L_adv, rec.L_fm, rec.L_seg, rec.MIL, rec.MIU, rec.val_dice)
        if rec.val_dice > best_dice:
            best_state, best_dice, best_epoch, stale = copy.deepcopy(state), rec.val_dice, rec.epoch, 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    return TrainingResult(best_state, logs, best_epoch)
