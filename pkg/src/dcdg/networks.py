"""The four networks: feature generator, segmentation model, shared
discriminator with a feature tap, and reverse mapper.

All normalization is per-instance, so no statistic is shared across the
batch and a forward pass never mutates module state.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError

GROUPS = ("fg", "sm", "d", "rm")


class SharpSiLU(nn.Module):
    """x * sigmoid(beta * x): a smooth ReLU with f(0) = 0 exactly. Smooth
    everywhere, so finite differences agree with autograd, yet for beta=5 it
    trains like ReLU."""

    def __init__(self, beta: float = 5.0):
        super().__init__()
        self.beta = beta

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.sigmoid(self.beta * x)


_ACTIVATIONS = {"relu": nn.ReLU, "smooth_relu": SharpSiLU}


@dataclass(frozen=True)
class ArchConfig:
    depth: int = 3
    base_width: int = 16
    in_channels: int = 1
    # "probs": discriminator judges SM output (indirect, default).
    # "features": discriminator judges F directly (DDDA ablation).
    disc_input: str = "probs"
    # ELU keeps the loss smooth enough for finite-difference gradient checks
    activation: str = "smooth_relu"

    def __post_init__(self):
        for name in ("depth", "base_width", "in_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"ArchConfig.{name} must be an integer >= 1, got {value!r}")
        if self.disc_input not in ("probs", "features"):
            raise ConfigError(f"ArchConfig.disc_input must be 'probs' or 'features', got {self.disc_input!r}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"ArchConfig.activation must be one of {sorted(_ACTIVATIONS)}, got {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * 2**i for i in range(self.depth))

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    @property
    def factor(self) -> int:
        return 2**self.depth

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad arch config: {exc}") from None


def _conv_block(cin: int, cout: int, act: str = "smooth_relu") -> list[nn.Module]:
    return [
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),  # cancelled by the norm
        nn.InstanceNorm2d(cout, affine=False, track_running_stats=False),
        _ACTIVATIONS[act](),
    ]


class Encoder(nn.Module):
    """conv3x3 -> norm -> activation -> 2x average-pool, repeated ``depth`` times."""

    def __init__(self, cin: int, widths: tuple[int, ...], act: str = "smooth_relu"):
        super().__init__()
        layers: list[nn.Module] = []
        for w in widths:
            layers += _conv_block(cin, w, act)
            layers.append(nn.AvgPool2d(2))
            cin = w
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class Decoder(nn.Module):
    """Nearest x2 upsample -> conv3x3 -> norm -> activation, then 1x1 conv + sigmoid."""

    def __init__(self, widths: tuple[int, ...], cout: int = 1, act: str = "smooth_relu"):
        super().__init__()
        chans = list(reversed(widths[:-1])) + [widths[0]]
        cin = widths[-1]
        layers: list[nn.Module] = []
        for w in chans:
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers += _conv_block(cin, w, act)
            cin = w
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, cout, 1)
        nn.init.zeros_(self.head.bias)

    def logits(self, f):
        return self.head(self.body(f))

    def forward(self, f):
        return torch.sigmoid(self.logits(f))


class Discriminator(nn.Module):
    """Shared double-sided discriminator.

    ``features`` (the tap F') is the output of the last conv block, taken after
    its activation and pooling so it lives in the same space as the
    generator features. The realness score is GAP + linear + sigmoid on top.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        cf = arch.feature_channels
        if arch.disc_input == "probs":
            self.trunk = Encoder(1, arch.widths, arch.activation)
        else:
            act = arch.activation
            self.trunk = nn.Sequential(*_conv_block(cf, cf, act), *_conv_block(cf, cf, act))
        self.fc = nn.Linear(cf, 1)

    def forward(self, p):
        feats = self.trunk(p)
        logit = self.fc(feats.mean(dim=(2, 3))).squeeze(1)
        return feats, logit


class DiscOutput(NamedTuple):
    features: torch.Tensor
    score: torch.Tensor
    logit: torch.Tensor


@dataclass
class ModelState:
    arch: ArchConfig
    fg: Encoder
    sm: Decoder
    d: Discriminator
    rm: Decoder
    seed: int = 0
    epoch: int = 0
    optimizers: dict = field(default_factory=dict)

    def group(self, name: str) -> nn.Module:
        return getattr(self, name)

    def named_arrays(self, group: str) -> dict[str, torch.Tensor]:
        return {f"{group}.{k}": v for k, v in self.group(group).state_dict().items()}

    def snapshot(self, groups=GROUPS) -> dict[str, torch.Tensor]:
        out = {}
        for g in groups:
            out.update({k: v.detach().clone() for k, v in self.named_arrays(g).items()})
        return out

    def parameters(self, groups=GROUPS):
        for g in groups:
            yield from self.group(g).parameters()


def init_model(arch: ArchConfig | None = None, seed: int = 0) -> ModelState:
    arch = arch or ArchConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fg = Encoder(arch.in_channels, arch.widths, arch.activation)
        sm = Decoder(arch.widths, act=arch.activation)
        d = Discriminator(arch)
        rm = Decoder(arch.widths, cout=arch.in_channels, act=arch.activation)
    return ModelState(arch=arch, fg=fg, sm=sm, d=d, rm=rm, seed=seed)


def _data(x) -> torch.Tensor:
    x = getattr(x, "data", x) if not isinstance(x, torch.Tensor) else x
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(x, dtype=torch.float32)
    return x


def fg_forward(state: ModelState, x) -> torch.Tensor:
    x = _data(x)
    arch = state.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(f"expected images [B,{arch.in_channels},H,W], got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % arch.factor or w % arch.factor:
        raise ShapeError(f"spatial size {h}x{w} not divisible by {arch.factor}")
    return state.fg(x)


def _check_features(state: ModelState, f: torch.Tensor) -> None:
    if f.ndim != 4 or f.shape[1] != state.arch.feature_channels:
        raise ShapeError(
            f"expected features [B,{state.arch.feature_channels},h,w], got {tuple(f.shape)}"
        )


def sm_forward(state: ModelState, f) -> torch.Tensor:
    f = _data(f)
    _check_features(state, f)
    return state.sm(f)


def sm_logits(state: ModelState, f) -> torch.Tensor:
    f = _data(f)
    _check_features(state, f)
    return state.sm.logits(f)


def d_forward(state: ModelState, p) -> DiscOutput:
    p = _data(p)
    arch = state.arch
    if arch.disc_input == "features":
        _check_features(state, p)
    else:
        if p.ndim != 4 or p.shape[1] != 1:
            raise ShapeError(f"expected probabilities [B,1,H,W], got {tuple(p.shape)}")
        if p.shape[-2] % arch.factor or p.shape[-1] % arch.factor:
            raise ShapeError(f"spatial size {tuple(p.shape[-2:])} not divisible by {arch.factor}")
    feats, logit = state.d(p)
    return DiscOutput(feats, torch.sigmoid(logit), logit)


def rm_forward(state: ModelState, f_prime, out_size: tuple[int, int] | None = None) -> torch.Tensor:
    """Reconstruct images from the discriminator tap. ``out_size`` (H, W), when
    given, pins the expected feature grid to (H/2^d, W/2^d)."""
    f_prime = _data(f_prime)
    _check_features(state, f_prime)
    if out_size is not None:
        want = (out_size[0] // state.arch.factor, out_size[1] // state.arch.factor)
        if tuple(f_prime.shape[-2:]) != want:
            raise ShapeError(f"feature grid {tuple(f_prime.shape[-2:])} does not match {want} for output {out_size}")
    return state.rm(f_prime)
