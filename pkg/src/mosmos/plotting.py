"""Static figures: attention-map overlays and Dice-vs-label-ratio curves."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _middle_slice(arr):
    arr = np.asarray(arr)
    while arr.ndim > 2:
        arr = arr[..., arr.shape[-1] // 2]
    return arr


def plot_attention_overlay(image, maps, class_names, path, mask=None):
    """One panel per class: the image in gray with the upsampled attention map on top.

    ``image``: spatial array; ``maps``: Q x spatial (same spatial size); 3D
    inputs are shown at their middle slice along the last axis.
    """
    maps = np.asarray(maps)
    if len(maps) != len(class_names):
        raise ValueError(f"{len(maps)} maps for {len(class_names)} class names")
    q = len(class_names)
    cols = q + (1 if mask is not None else 0)
    fig, axes = plt.subplots(1, cols, figsize=(2.2 * cols, 2.4), squeeze=False)
    base = _middle_slice(image)
    for i, name in enumerate(class_names):
        ax = axes[0, i]
        ax.imshow(base, cmap="gray")
        ax.imshow(_middle_slice(maps[i]), cmap="jet", alpha=0.45)
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    if mask is not None:
        ax = axes[0, -1]
        ax.imshow(_middle_slice(mask), cmap="tab10", interpolation="nearest", vmin=0, vmax=9)
        ax.set_title("ground truth", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_label_ratio_curves(sweep, path):
    """Mean Dice (with min/max band over seeds) against labeled fraction, one line per init."""
    ratios = np.asarray(sweep["ratios"], dtype=float) * 100
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for name, per_ratio in sweep["series"].items():
        vals = [np.asarray(v, dtype=float) for v in per_ratio]
        mean = np.array([v.mean() for v in vals])
        ax.plot(ratios, mean, marker="o", label=name)
        if all(len(v) > 1 for v in vals):
            ax.fill_between(ratios, [v.min() for v in vals], [v.max() for v in vals], alpha=0.2)
    ax.set_xlabel("labeled training data (%)")
    ax.set_ylabel("mean test Dice")
    ax.set_xticks(ratios)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
