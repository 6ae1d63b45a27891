"""Synthetic two-center datasets, manifest I/O and the split protocol."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ArtifactIOError, ConfigError, DataError

log = logging.getLogger(__name__)

CENTERS = ("C1", "C2")


@dataclass(frozen=True)
class CenterSpec:
    center_id: str = "C1"
    n_cases: int = 100
    image_size: tuple[int, int] = (64, 64)
    fg_intensity_range: tuple[float, float] = (0.60, 0.80)
    bg_intensity_range: tuple[float, float] = (0.15, 0.30)
    noise_sigma: float = 0.06
    bias_field_amplitude: float = 0.10
    shape_family: str = "ellipse_with_lobes"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "fg_intensity_range", tuple(float(v) for v in self.fg_intensity_range))
        object.__setattr__(self, "bg_intensity_range", tuple(float(v) for v in self.bg_intensity_range))
        if self.center_id not in CENTERS:
            raise ConfigError(f"center_id must be one of {CENTERS}, got {self.center_id!r}")
        if self.n_cases < 1:
            raise ConfigError(f"n_cases must be >= 1, got {self.n_cases}")
        h, w = self.image_size
        if h < 16 or w < 16 or h % 8 or w % 8:
            raise ConfigError(f"image_size must be multiples of 8 and >= 16, got {self.image_size}")
        for name in ("fg_intensity_range", "bg_intensity_range"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi <= 1, got {(lo, hi)}")
        if self.noise_sigma < 0 or self.bias_field_amplitude < 0:
            raise ConfigError("noise_sigma and bias_field_amplitude must be >= 0")
        if self.shape_family != "ellipse_with_lobes":
            raise ConfigError(f"unknown shape_family {self.shape_family!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "CenterSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad center spec: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["fg_intensity_range"] = list(self.fg_intensity_range)
        d["bg_intensity_range"] = list(self.bg_intensity_range)
        return d


def default_center_specs(seed: int = 0, n_c1: int = 130, n_c2: int = 80) -> dict[str, CenterSpec]:
    """Default benchmark centers. C2 has lower, shifted intensities and a
    stronger noise/bias profile, as a different scanner protocol would."""
    c1 = CenterSpec("C1", n_c1, seed=seed)
    c2 = CenterSpec(
        "C2",
        n_c2,
        fg_intensity_range=(0.45, 0.60),
        bg_intensity_range=(0.20, 0.35),
        noise_sigma=0.08,
        bias_field_amplitude=0.25,
        seed=seed + 1,
    )
    return {"C1": c1, "C2": c2}


@dataclass
class Case:
    case_id: str
    image: np.ndarray  # float32 [1, H, W]
    mask: np.ndarray | None  # uint8 [1, H, W] in {0, 1}
    center_id: str


@dataclass
class Dataset:
    cases: list[Case] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate case_ids in dataset")

    def __len__(self):
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.cases + other.cases)

    @property
    def has_masks(self) -> bool:
        return all(c.mask is not None for c in self.cases)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.cases[i] for i in idx])


@dataclass
class ImageBatch:
    data: torch.Tensor
    case_ids: list[str]
    center_ids: list[str]


@dataclass
class MaskBatch:
    data: torch.Tensor


# -- synthetic shapes -------------------------------------------------------

def _rasterize_shape(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    s = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cy = rng.uniform(0.38, 0.62) * h
    cx = rng.uniform(0.38, 0.62) * w
    a = rng.uniform(0.12, 0.20) * s
    b = rng.uniform(0.10, 0.17) * s
    phi = rng.uniform(0, math.pi)
    cos, sin = math.cos(phi), math.sin(phi)
    u = (xx - cx) * cos + (yy - cy) * sin
    v = -(xx - cx) * sin + (yy - cy) * cos
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0

    n_lobes = int(rng.integers(2, 5))
    base = rng.uniform(0, 2 * math.pi)
    for k in range(n_lobes):
        t = base + 2 * math.pi * k / n_lobes + rng.uniform(-0.4, 0.4)
        # boundary point of the body in its own frame, pushed outward
        bu, bv = a * math.cos(t), b * math.sin(t)
        r = rng.uniform(0.04, 0.07) * s
        reach = rng.uniform(0.6, 1.2) * r
        norm = math.hypot(bu / a**2, bv / b**2)
        nu, nv = (bu / a**2) / norm, (bv / b**2) / norm
        lu, lv = bu + reach * nu, bv + reach * nv
        ly = cy + lu * sin + lv * cos
        lx = cx + lu * cos - lv * sin
        mask |= (xx - lx) ** 2 + (yy - ly) ** 2 <= r**2
        # neck joining the lobe to the body
        for f in np.linspace(0.0, 1.0, 6):
            pu, pv = bu + (lu - bu) * f, bv + (lv - bv) * f
            nx = cx + pu * cos - pv * sin
            ny = cy + pu * sin + pv * cos
            mask |= (xx - nx) ** 2 + (yy - ny) ** 2 <= (0.7 * r) ** 2
    return mask


def _bias_field(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy / h, xx / w
    field_ = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        py, px = rng.uniform(0, 2 * math.pi, size=2)
        field_ += np.cos(2 * math.pi * fy * yy + py) * np.cos(2 * math.pi * fx * xx + px)
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def _generate_case(spec: CenterSpec, index: int) -> Case:
    h, w = spec.image_size
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(100):
        mask = _rasterize_shape(rng, h, w)
        if 0.02 <= mask.mean() <= 0.40:
            break
    else:  # pragma: no cover - shape ranges make this unreachable
        raise DataError("could not draw a shape within the foreground-fraction bounds")
    fg = rng.uniform(*spec.fg_intensity_range)
    bg = rng.uniform(*spec.bg_intensity_range)
    img = np.where(mask, fg, bg)
    bias = _bias_field(rng, h, w)
    noise = rng.standard_normal((h, w))
    if spec.bias_field_amplitude > 0:
        img = img * (1.0 + spec.bias_field_amplitude * bias)
    if spec.noise_sigma > 0:
        img = img + spec.noise_sigma * noise
    img = np.clip(img, 0.0, 1.0)
    return Case(
        case_id=f"{spec.center_id}_{index:04d}",
        image=img.astype(np.float32)[None],
        mask=mask.astype(np.uint8)[None],
        center_id=spec.center_id,
    )


def generate_center(spec: CenterSpec) -> Dataset:
    return Dataset([_generate_case(spec, i) for i in range(spec.n_cases)])


# -- manifest I/O -----------------------------------------------------------

def save_dataset(ds: Dataset, out_dir, name: str = "manifest.json") -> Path:
    """Write 16-bit PNG images, 8-bit PNG masks and a JSON manifest with
    paths relative to ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        entries = []
        for c in ds:
            img_rel = f"images/{c.case_id}.png"
            px = np.round(np.clip(c.image[0], 0, 1) * 65535).astype(np.uint16)
            Image.fromarray(px).save(out_dir / img_rel)
            mask_rel = None
            if c.mask is not None:
                mask_rel = f"masks/{c.case_id}.png"
                Image.fromarray((c.mask[0] * 255).astype(np.uint8)).save(out_dir / mask_rel)
            entries.append(
                {"case_id": c.case_id, "image_path": img_rel, "mask_path": mask_rel, "center_id": c.center_id}
            )
        path = out_dir / name
        path.write_text(json.dumps({"cases": entries}, indent=2) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write dataset to {out_dir}: {exc}") from exc
    return path


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise ArtifactIOError(f"missing file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    return arr.astype(np.float64)


def _minmax(arr: np.ndarray) -> np.ndarray:
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def _load_case(root: Path, e: dict) -> Case:
    img = _minmax(_read_png(root / e["image_path"]))
    mask = None
    if e.get("mask_path"):
        raw = _read_png(root / e["mask_path"])
        scale = 255.0 if raw.max() > 1 else 1.0
        if raw.max() > 255:
            scale = 65535.0
        raw = raw / scale
        ambiguous = np.unique(raw[(raw > 0.25) & (raw < 0.75)])
        if ambiguous.size > 2:
            log.warning("mask %s has %d distinct values in (0.25, 0.75); binarizing at 0.5",
                        e["mask_path"], ambiguous.size)
        mask = (raw >= 0.5).astype(np.uint8)[None]
    return Case(e["case_id"], img.astype(np.float32)[None], mask, e.get("center_id", "C1"))


def load_dataset(manifest_path, workers: int = 1) -> Dataset:
    """Load a manifest. ``workers`` > 1 reads files on a thread pool; case
    order is the manifest order either way."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ArtifactIOError(f"missing manifest: {manifest_path}")
    try:
        entries = json.loads(manifest_path.read_text())["cases"]
        for e in entries:
            e["case_id"], e["image_path"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc!r}") from exc
    root = manifest_path.parent
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cases = list(pool.map(lambda e: _load_case(root, e), entries))
    else:
        cases = [_load_case(root, e) for e in entries]
    return Dataset(cases)


# -- splits -----------------------------------------------------------------

def split_dataset(ds: Dataset, n_val: int, n_test: int, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    n = len(ds)
    if n_val < 0 or n_test < 0 or n_val + n_test >= n:
        raise DataError(f"cannot take {n_val} val + {n_test} test cases from {n} and keep a training set")
    perm = np.random.default_rng(seed).permutation(n)
    val = sorted(perm[:n_val])
    test = sorted(perm[n_val:n_val + n_test])
    train = sorted(perm[n_val + n_test:])
    return ds.subset(train), ds.subset(val), ds.subset(test)


def strip_masks(ds: Dataset) -> Dataset:
    return Dataset([replace(c, mask=None) for c in ds])


def n_labeled(n: int, r: float) -> int:
    # round half up
    return int(math.floor(r * n + 0.5))


def make_semi_split(train: Dataset, r: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"labeled ratio must be in (0, 1], got {r}")
    k = n_labeled(len(train), r)
    perm = np.random.default_rng(seed).permutation(len(train))
    return train.subset(sorted(perm[:k])), strip_masks(train.subset(sorted(perm[k:])))


# -- batching ---------------------------------------------------------------

def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None):
    """Yield (ImageBatch, MaskBatch | None). Shuffled when ``rng`` is given."""
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    for i in range(0, len(ds), batch_size):
        chunk = [ds.cases[j] for j in order[i:i + batch_size]]
        x = torch.from_numpy(np.stack([c.image for c in chunk]).astype(np.float32))
        img = ImageBatch(x, [c.case_id for c in chunk], [c.center_id for c in chunk])
        if all(c.mask is not None for c in chunk):
            mb = MaskBatch(torch.from_numpy(np.stack([c.mask for c in chunk]).astype(np.float32)))
        else:
            mb = None
        yield img, mb
