"""Figure rendering for run outputs: loss curves, sample sheets, PCA walks.

Every image sheet goes to disk as a PNG next to a raw ``.npy`` sidecar so
downstream analysis never depends on 8-bit quantization.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from condflow.datasets import AB_SCALE, L_OFFSET, L_SCALE, lab_to_rgb


def _ensure_dir(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def save_array_png(arr: np.ndarray, path: str, cmap: str | None = None):
    """8-bit PNG plus float sidecar; arr is (H, W) grayscale or (H, W, 3)."""
    _ensure_dir(path)
    arr = np.asarray(arr)
    clipped = np.clip(arr, 0.0, 1.0)
    if clipped.ndim == 2:
        plt.imsave(path, clipped, cmap=cmap or "gray", vmin=0.0, vmax=1.0)
    else:
        plt.imsave(path, clipped)
    np.save(path + ".npy", arr)


def render_loss_curves(csv_path: str, out_path: str, smooth_window: int = 200):
    """Loss and per-dim NLL over steps, with the learning-rate schedule."""
    steps, lrs, losses, per_dim = [], [], [], []
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            steps.append(int(row["step"]))
            lrs.append(float(row["lr"]))
            losses.append(float(row["loss"]))
            per_dim.append(float(row["nll_per_dim"]))
    if not steps:
        raise ValueError(f"empty loss log {csv_path}")
    steps = np.array(steps)
    losses = np.array(losses)

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, losses, lw=0.6, alpha=0.4, label="loss")
    if len(losses) >= smooth_window:
        kernel = np.ones(smooth_window) / smooth_window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax1.plot(steps[smooth_window - 1:], smooth, lw=1.5,
                 label=f"smoothed (w={smooth_window})")
    ax1.set_ylabel("training loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1b = ax1.twinx()
    ax1b.plot(steps, lrs, color="tab:red", lw=0.8, alpha=0.6)
    ax1b.set_yscale("log")
    ax1b.set_ylabel("lr", color="tab:red")
    ax2.plot(steps, per_dim, lw=0.8, color="tab:green")
    ax2.set_ylabel("NLL per dim (nats)")
    ax2.set_xlabel("step")
    fig.tight_layout()
    _ensure_dir(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def image_sheet(images: np.ndarray, out_path: str, row_labels=None,
                col_labels=None, title: str | None = None):
    """Grid figure from images (R, C, H, W) grayscale or (R, C, H, W, 3)."""
    images = np.asarray(images)
    rows, cols = images.shape[:2]
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.15),
                             squeeze=False)
    for r in range(rows):
        for c in range(cols):
            ax = axes[r][c]
            img = np.clip(images[r, c], 0.0, 1.0)
            if img.ndim == 2:
                ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(img)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0 and col_labels is not None:
                ax.set_title(str(col_labels[c]), fontsize=8)
            if c == 0 and row_labels is not None:
                ax.set_ylabel(str(row_labels[r]), fontsize=8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _ensure_dir(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    np.save(out_path + ".npy", images)
    return out_path


def digit_grid(samples_norm: np.ndarray, out_path: str, offset: float = 0.5,
               title: str | None = None, row_labels=None):
    """Sheet for flattened digit samples (R, C, D): rows share one latent,
    columns share one condition."""
    r, c, d = samples_norm.shape
    side = int(round(np.sqrt(d)))
    imgs = samples_norm.reshape(r, c, side, side) + offset
    return image_sheet(imgs, out_path, row_labels=row_labels,
                       col_labels=list(range(c)), title=title)


def colorization_to_rgb(ab_norm: np.ndarray, l_norm: np.ndarray) -> np.ndarray:
    """Combine normalized model outputs with their condition into RGB.

    ``ab_norm``: (N, 2, H, W) in flow units; ``l_norm``: (N, 1, Hc, Wc).
    The luminance is average-pooled down to the chroma resolution.
    """
    ab = np.asarray(ab_norm, dtype=np.float64) * AB_SCALE
    l_full = np.asarray(l_norm, dtype=np.float64) * L_SCALE + L_OFFSET
    n, _, h, w = ab.shape
    factor = l_full.shape[2] // h
    pooled = l_full[:, 0].reshape(n, h, factor, w, factor).mean(axis=(2, 4))
    lab = np.concatenate([pooled[:, None], ab], axis=1).transpose(0, 2, 3, 1)
    return lab_to_rgb(lab)


def colorization_sheet(l_norm: np.ndarray, samples_ab: np.ndarray, out_path: str,
                       title: str | None = None):
    """One row per condition: grayscale input followed by k colorizations.

    ``l_norm``: (N, 1, Hc, Wc); ``samples_ab``: (N, k, 2, H, W) flow units.
    """
    n, k = samples_ab.shape[:2]
    grays = np.asarray(l_norm)[:, 0] + L_OFFSET / L_SCALE
    cells = []
    for i in range(n):
        rgb = colorization_to_rgb(samples_ab[i], np.repeat(l_norm[i][None], k, axis=0))
        h, w = rgb.shape[1:3]
        factor = grays.shape[1] // h
        gray_small = grays[i].reshape(h, factor, w, factor).mean(axis=(1, 3))
        row = [np.repeat(gray_small[:, :, None], 3, axis=2)] + list(rgb)
        cells.append(np.stack(row))
    sheet = np.stack(cells)
    return image_sheet(sheet, out_path,
                       col_labels=["input"] + [f"z{j}" for j in range(k)],
                       title=title)


def pca_axis_sheet(decoded: np.ndarray, scales, out_path: str, axis_index: int,
                   render=None):
    """Decodings along one principal direction; ``decoded`` is (S, ...) data
    space, ``render`` maps one item to an (H, W) or (H, W, 3) image."""
    imgs = []
    for item in decoded:
        imgs.append(render(item) if render is not None else np.asarray(item))
    sheet = np.stack(imgs)[None]
    return image_sheet(sheet, out_path,
                       col_labels=[f"{s:+.1f} sd" for s in scales],
                       title=f"principal axis {axis_index}")


def explained_variance_figure(explained: np.ndarray, out_path: str, top: int = 16):
    fig, ax = plt.subplots(figsize=(5, 3))
    top = min(top, len(explained))
    frac = explained[:top] / explained.sum()
    ax.bar(np.arange(top), frac)
    ax.set_xlabel("component")
    ax.set_ylabel("variance fraction")
    fig.tight_layout()
    _ensure_dir(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
