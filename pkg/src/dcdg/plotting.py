"""Static figures for the ``report`` command (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .diagnostics import AdaptationHistory  # noqa: E402
from .errors import ArtifactIOError  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, metadata={"Software": None})
    except OSError as exc:
        raise ArtifactIOError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def plot_mil_miu(history: AdaptationHistory, path) -> Path:
    """MIL and MIU per epoch with MIL+MIU and MIL-MIU overlays."""
    epochs = np.array([r[0] for r in history.rows])
    mil, miu = history.mil, history.miu
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, mil, "o-", label="MIL")
    ax.plot(epochs, miu, "s-", label="MIU")
    ax.plot(epochs, mil + miu, "--", label="MIL + MIU")
    ax.plot(epochs, mil - miu, ":", label="MIL - MIU")
    ax.axhline(0.5, color="grey", lw=0.5)
    ax.axhline(1.0, color="grey", lw=0.5)
    ax.axhline(0.0, color="grey", lw=0.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("discriminator score")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(rows: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("L_d", "L_adv", "L_fm", "L_seg"):
        ax.plot(epochs, [r[key] for r in rows], label=key)
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["val_dice"] for r in rows], "k--", label="val Dice")
    ax2.set_ylabel("validation Dice")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="best", fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(long_rows: list[dict], out_dir) -> list[Path]:
    """One boxplot per metric over modes; ``long_rows`` have mode, metric, value."""
    out_dir = Path(out_dir)
    paths = []
    metrics = sorted({r["metric"] for r in long_rows})
    modes = list(dict.fromkeys(r["mode"] for r in long_rows))
    for metric in metrics:
        data = [[r["value"] for r in long_rows if r["mode"] == m and r["metric"] == metric] for m in modes]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(modes) + 1), modes)
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} by mode")
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"ablation_{metric}.png"))
    return paths
