"""Data ingestion and synthesis.

Covers four corpora: MNIST-format IDX files (with a procedural handwritten
digit stand-in for offline runs), synthetic conditional Gaussian densities
with exact log-likelihoods, a procedural colored-shapes colorization corpus,
and sRGB/Lab conversion with a D65 white point.
"""

from __future__ import annotations

import colorsys
import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from condflow.errors import DataError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


# --------------------------------------------------------------------------
# sRGB <-> CIE Lab (D65, 2 degree observer)
# --------------------------------------------------------------------------

_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_LAB_DELTA = 6.0 / 29.0


def _srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _lab_f(t):
    return np.where(t > _LAB_DELTA ** 3, np.cbrt(t),
                    t / (3 * _LAB_DELTA ** 2) + 4.0 / 29.0)


def _lab_f_inv(t):
    return np.where(t > _LAB_DELTA, t ** 3, 3 * _LAB_DELTA ** 2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """sRGB in [0,1], channel-last, to Lab (L in [0,100], a/b roughly +-110)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise DataError(f"expected channel-last RGB, got shape {rgb.shape}")
    xyz = _srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    fxyz = _lab_f(xyz / _WHITE_D65)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * fxyz[..., 1] - 16.0
    lab[..., 1] = 500.0 * (fxyz[..., 0] - fxyz[..., 1])
    lab[..., 2] = 200.0 * (fxyz[..., 1] - fxyz[..., 2])
    return lab


def lab_to_rgb(lab: np.ndarray, return_gamut_mask: bool = False):
    """Inverse of ``rgb_to_lab``; out-of-gamut values are clipped to [0,1]."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.shape[-1] != 3:
        raise DataError(f"expected channel-last Lab, got shape {lab.shape}")
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], axis=-1)
    linear = (xyz * _WHITE_D65) @ _XYZ_TO_RGB.T
    rgb = _linear_to_srgb(linear)
    clipped = np.clip(rgb, 0.0, 1.0)
    if return_gamut_mask:
        in_gamut = np.all((rgb > -1e-6) & (rgb < 1 + 1e-6), axis=-1)
        return clipped, in_gamut
    return clipped


# --------------------------------------------------------------------------
# MNIST IDX files
# --------------------------------------------------------------------------

@dataclass
class LabeledImageBatch:
    """Images scaled/centered for the flow plus their integer labels."""

    images: np.ndarray          # (N, 1, H, W) normalized
    labels: np.ndarray          # (N,) int64
    offset: float = 0.5         # normalization: x_norm = x01 - offset
    scale: float = 1.0

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.scale + self.offset

    @property
    def n(self) -> int:
        return self.images.shape[0]


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise DataError(f"truncated IDX file while reading {what}")
    return buf


def load_mnist_idx(images_path, labels_path, offset: float = 0.5,
                   scale: float = 1.0) -> LabeledImageBatch:
    """Read big-endian IDX image/label files into a normalized batch.

    Pixels are scaled from [0,255] to [0,1] and then shifted/scaled by the
    normalization record (default: subtract 0.5).
    """
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(
                f"wrong magic {magic} in {images_path}, expected {IDX_IMAGES_MAGIC}")
        raw = _read_exact(f, n * rows * cols, "image data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)

    with open(labels_path, "rb") as f:
        magic, n_labels = struct.unpack(">ii", _read_exact(f, 8, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DataError(
                f"wrong magic {magic} in {labels_path}, expected {IDX_LABELS_MAGIC}")
        raw = _read_exact(f, n_labels, "label data")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_labels:
        raise DataError(f"image/label count mismatch: {n} images, {n_labels} labels")
    x01 = images.astype(np.float32) / 255.0
    normalized = (x01 - offset) / scale
    return LabeledImageBatch(normalized.astype(np.float32), labels,
                             offset=offset, scale=scale)


def write_mnist_idx(images_u8: np.ndarray, labels: np.ndarray,
                    images_path, labels_path):
    """Write uint8 images (N, H, W) and labels to IDX files."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    if labels.shape[0] != n:
        raise DataError("image/label count mismatch")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
        f.write(labels.tobytes())


# --------------------------------------------------------------------------
# Procedural handwritten-style digits (offline stand-in corpus)
# --------------------------------------------------------------------------

def _arc(cx, cy, rx, ry, deg0, deg1, n=24):
    th = np.radians(np.linspace(deg0, deg1, n))
    return np.stack([cx + rx * np.cos(th), cy + ry * np.sin(th)], axis=1)


def _digit_strokes(digit: int) -> list[np.ndarray]:
    """Polyline skeletons in a unit box, x right and y down."""
    if digit == 0:
        return [_arc(0.5, 0.5, 0.26, 0.36, 0, 360)]
    if digit == 1:
        return [np.array([[0.32, 0.30], [0.52, 0.12], [0.52, 0.90]])]
    if digit == 2:
        return [_arc(0.5, 0.33, 0.24, 0.22, 180, 345),
                np.array([[0.72, 0.42], [0.30, 0.86], [0.76, 0.86]])]
    if digit == 3:
        return [_arc(0.45, 0.30, 0.25, 0.19, 200, 450),
                _arc(0.45, 0.69, 0.27, 0.21, 270, 520)]
    if digit == 4:
        return [np.array([[0.58, 0.10], [0.24, 0.60], [0.80, 0.60]]),
                np.array([[0.62, 0.34], [0.62, 0.90]])]
    if digit == 5:
        return [np.array([[0.72, 0.12], [0.32, 0.12], [0.29, 0.46]]),
                _arc(0.47, 0.66, 0.26, 0.23, 250, 510)]
    if digit == 6:
        return [np.array([[0.66, 0.10], [0.45, 0.30], [0.31, 0.52], [0.27, 0.68]]),
                _arc(0.50, 0.67, 0.23, 0.21, 0, 360)]
    if digit == 7:
        return [np.array([[0.25, 0.13], [0.76, 0.13], [0.40, 0.90]])]
    if digit == 8:
        return [_arc(0.50, 0.30, 0.20, 0.18, 0, 360),
                _arc(0.50, 0.68, 0.24, 0.21, 0, 360)]
    if digit == 9:
        return [_arc(0.50, 0.32, 0.22, 0.20, 0, 360),
                np.array([[0.72, 0.32], [0.70, 0.60], [0.58, 0.90]])]
    raise DataError(f"no stroke model for digit {digit}")


def _render_strokes(strokes, size: int, thickness: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([(xs + 0.5) / size, (ys + 0.5) / size], axis=-1)  # (H,W,2)
    dist = np.full((size, size), np.inf)
    for line in strokes:
        a, b = line[:-1], line[1:]
        ab = b - a                                           # (S,2)
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        ap = pts[:, :, None, :] - a[None, None, :, :]        # (H,W,S,2)
        t = np.clip((ap * ab).sum(axis=-1) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        d = np.linalg.norm(pts[:, :, None, :] - closest, axis=-1)
        dist = np.minimum(dist, d.min(axis=-1))
    soft = 0.6 / size
    return np.clip((thickness - dist) / soft + 1.0, 0.0, 1.0)


def render_digit(digit: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """One grayscale digit image in [0,1] with random handwriting-style jitter."""
    strokes = [s.copy() for s in _digit_strokes(digit)]
    angle = rng.uniform(-0.18, 0.18)
    shear = rng.uniform(-0.25, 0.25)
    sc = rng.uniform(0.78, 1.02)
    shift = rng.uniform(-0.05, 0.05, size=2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) * sc
    center = np.array([0.5, 0.5])
    warped = [(s - center) @ mat.T + center + shift for s in strokes]
    thickness = rng.uniform(0.030, 0.060)
    img = _render_strokes(warped, size, thickness)
    return img * rng.uniform(0.85, 1.0)


def render_digit_corpus(n: int, seed: int, size: int = 28):
    """Procedural labeled digit corpus (uint8 images, int labels)."""
    rng = np.random.default_rng(seed)
    images = np.zeros((n, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n).astype(np.int64)
    for i in range(n):
        img = render_digit(int(labels[i]), rng, size)
        images[i] = np.round(img * 255.0).astype(np.uint8)
    return images, labels


def ensure_mnist(root, n_train: int = 10000, n_test: int = 2000, seed: int = 1234,
                 allow_synthetic: bool = True) -> dict:
    """Resolve MNIST-format IDX paths under ``root``.

    Prefers real files (train-images-idx3-ubyte etc.); when absent and
    ``allow_synthetic`` is on, renders a procedural digit corpus and writes
    it in the same IDX format, so the loader path is identical either way.
    Returns a dict with paths and a ``synthetic`` flag.
    """
    root = str(root)
    os.makedirs(root, exist_ok=True)
    real = {
        "train_images": os.path.join(root, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(root, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(root, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(root, "t10k-labels-idx1-ubyte"),
    }
    if all(os.path.exists(p) for p in real.values()):
        return {**real, "synthetic": False}
    synth = {
        "train_images": os.path.join(root, "synth-train-images-idx3-ubyte"),
        "train_labels": os.path.join(root, "synth-train-labels-idx1-ubyte"),
        "test_images": os.path.join(root, "synth-test-images-idx3-ubyte"),
        "test_labels": os.path.join(root, "synth-test-labels-idx1-ubyte"),
    }
    if not allow_synthetic:
        raise DataError(f"MNIST IDX files not found under {root}")
    if not all(os.path.exists(p) for p in synth.values()):
        tr_img, tr_lab = render_digit_corpus(n_train, seed)
        te_img, te_lab = render_digit_corpus(n_test, seed + 1)
        write_mnist_idx(tr_img, tr_lab, synth["train_images"], synth["train_labels"])
        write_mnist_idx(te_img, te_lab, synth["test_images"], synth["test_labels"])
    return {**synth, "synthetic": True}


# --------------------------------------------------------------------------
# Synthetic conditional densities (exact likelihood oracles)
# --------------------------------------------------------------------------

@dataclass
class SyntheticCondDensity:
    """Per-condition Gaussian mixture with analytic conditional density."""

    means: np.ndarray           # (K, M, D)
    covs: np.ndarray            # (K, M, D, D)
    weights: np.ndarray         # (K, M)
    _chols: np.ndarray = field(init=False, repr=False)
    _inv_covs: np.ndarray = field(init=False, repr=False)
    _log_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k, m, d = self.means.shape
        if self.covs.shape != (k, m, d, d):
            raise DataError(f"covariance shape {self.covs.shape} != {(k, m, d, d)}")
        if self.weights.shape != (k, m):
            raise DataError(f"weights shape {self.weights.shape} != {(k, m)}")
        if not np.allclose(self.weights.sum(axis=1), 1.0):
            raise DataError("mixture weights must sum to 1 per condition")
        self._chols = np.linalg.cholesky(self.covs)     # fails if not PD
        self._inv_covs = np.linalg.inv(self.covs)
        _, logdets = np.linalg.slogdet(self.covs)
        self._log_norms = -0.5 * (d * np.log(2 * np.pi) + logdets)

    @property
    def n_conditions(self) -> int:
        return self.means.shape[0]

    @property
    def n_components(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def sample(self, condition: int, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(self.n_components, size=n, p=self.weights[condition])
        eps = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for m in range(self.n_components):
            sel = comps == m
            if sel.any():
                out[sel] = self.means[condition, m] + eps[sel] @ self._chols[condition, m].T
        return out

    def log_prob(self, x: np.ndarray, condition: int) -> np.ndarray:
        """Exact log p(x | condition) per row of x."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diffs = x[:, None, :] - self.means[condition][None, :, :]   # (N, M, D)
        mahal = np.einsum("nmd,mde,nme->nm", diffs, self._inv_covs[condition], diffs)
        comp_log = self._log_norms[condition][None, :] - 0.5 * mahal
        weighted = comp_log + np.log(self.weights[condition])[None, :]
        top = weighted.max(axis=1, keepdims=True)
        return (top + np.log(np.exp(weighted - top).sum(axis=1, keepdims=True))).ravel()

    def differential_entropy(self, condition: int) -> float:
        """Closed form; only defined for single-component conditions."""
        if self.n_components != 1:
            raise DataError("entropy is closed-form only for unimodal conditions")
        d = self.dim
        _, logdet = np.linalg.slogdet(self.covs[condition, 0])
        return 0.5 * (d * np.log(2 * np.pi * np.e) + logdet)

    def mode_centers(self, condition: int) -> np.ndarray:
        return self.means[condition]


def gaussian_ring_density(n_conditions: int = 4, dim: int = 2,
                          radius: float = 3.0) -> SyntheticCondDensity:
    """Unimodal Gaussians on a ring; distinct anisotropic diagonal covariances."""
    means = np.zeros((n_conditions, 1, dim))
    covs = np.zeros((n_conditions, 1, dim, dim))
    for k in range(n_conditions):
        angle = 2 * np.pi * k / n_conditions
        means[k, 0, 0] = radius * np.cos(angle)
        means[k, 0, 1 % dim] = radius * np.sin(angle)
        sigmas = 0.6 + 0.15 * ((k + np.arange(dim)) % 3)
        covs[k, 0] = np.diag(sigmas ** 2)
    weights = np.ones((n_conditions, 1))
    return SyntheticCondDensity(means, covs, weights)


def bimodal_density(separation: float = 3.0) -> SyntheticCondDensity:
    """Two conditions, two well-separated modes each, unequal weights on the
    second condition (mode-coverage testbed)."""
    means = np.array([
        [[-separation, -separation], [separation, separation]],
        [[-separation, separation], [separation, -separation]],
    ])
    covs = np.tile(np.eye(2) * 0.5 ** 2, (2, 2, 1, 1))
    weights = np.array([[0.5, 0.5], [0.7, 0.3]])
    return SyntheticCondDensity(means, covs, weights)


def synth_conditional(density: SyntheticCondDensity, n: int, seed: int):
    """Draw (x, condition labels, exact conditional log density)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, density.n_conditions, size=n)
    x = np.empty((n, density.dim))
    logp = np.empty(n)
    for k in range(density.n_conditions):
        sel = labels == k
        count = int(sel.sum())
        if count:
            xk = density.sample(k, count, rng)
            x[sel] = xk
            logp[sel] = density.log_prob(xk, k)
    return x, labels.astype(np.int64), logp


# --------------------------------------------------------------------------
# Procedural colored-shapes colorization corpus
# --------------------------------------------------------------------------

# Hue palettes per shape class; two well-separated modes each so the
# conditional color distribution is genuinely multi-modal.
_SHAPE_PALETTES = {
    0: (0.00, 0.58),   # circle: red / azure
    1: (0.33, 0.08),   # rectangle: green / orange
    2: (0.78, 0.15),   # triangle: violet / yellow
}


@dataclass
class ColorizationSample:
    """Luminance condition plus chrominance target from one rendered image."""

    L: np.ndarray               # (1, Hc, Wc), Lab L units [0, 100]
    ab: np.ndarray              # (2, H, W), Lab a/b units
    provenance: tuple           # (geometry_seed, color_seed)


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    cx, cy = rng.uniform(0.25, 0.75, size=2) * size
    r = rng.uniform(0.12, 0.28) * size
    if kind == 0:
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r ** 2
    if kind == 1:
        w, h = rng.uniform(0.8, 1.6) * r, rng.uniform(0.8, 1.6) * r
        return (np.abs(xs - cx) <= w) & (np.abs(ys - cy) <= h)
    # triangle: apex up, half-plane intersection
    hh = 1.2 * r
    base = cy + hh / 2
    apex = cy - hh / 2
    half = 1.1 * r
    inside = (ys <= base) & (ys >= apex)
    frac = np.clip((ys - apex) / max(hh, 1e-9), 0.0, 1.0)
    return inside & (np.abs(xs - cx) <= half * frac)


def _mode_color(kind: int, mode: int, rng: np.random.Generator):
    hue = _SHAPE_PALETTES[kind][mode] + rng.uniform(-0.03, 0.03)
    sat = rng.uniform(0.70, 0.95)
    val = rng.uniform(0.60, 0.90)
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, sat, val))


def render_shapes_rgb(geometry_seed: int, color_seed: int, render_size: int):
    """RGB image: neutral gray background, 1-3 colored shapes.

    Geometry (layout, shape classes, background level) comes only from
    ``geometry_seed``; hues come only from ``color_seed``, so regenerating
    with new color seeds keeps background pixels bit-identical.
    """
    geom = np.random.default_rng(geometry_seed)
    color = np.random.default_rng(color_seed)
    gray = geom.uniform(0.40, 0.75)
    img = np.full((render_size, render_size, 3), gray)
    n_shapes = int(geom.integers(1, 4))
    for _ in range(n_shapes):
        kind = int(geom.integers(0, 3))
        mask = _shape_mask(kind, render_size, geom)
        mode = int(color.integers(0, 2))
        img[mask] = _mode_color(kind, mode, color)
    return img


def make_colorization_sample(geometry_seed: int, color_seed: int,
                             size: int, cond_size: int | None = None) -> ColorizationSample:
    """Render once, convert to Lab, pool chrominance down to target size."""
    cond_size = cond_size if cond_size is not None else 2 * size
    if cond_size % size:
        raise DataError("condition size must be a multiple of the target size")
    rgb = render_shapes_rgb(geometry_seed, color_seed, cond_size)
    lab = rgb_to_lab(rgb)
    L = lab[..., 0][None, :, :]
    factor = cond_size // size
    ab_full = lab[..., 1:]
    pooled = ab_full.reshape(size, factor, size, factor, 2).mean(axis=(1, 3))
    ab = pooled.transpose(2, 0, 1)
    return ColorizationSample(L.astype(np.float32), ab.astype(np.float32),
                              provenance=(geometry_seed, color_seed))


def synth_colored_shapes(n: int, size: int, seed: int,
                         cond_size: int | None = None) -> list[ColorizationSample]:
    """Corpus of colorization samples; one fresh geometry and palette each."""
    if size % 2:
        raise DataError("target size must be even")
    seq = np.random.SeedSequence(seed)
    out = []
    for i, child in enumerate(seq.spawn(n)):
        g_seed, c_seed = child.generate_state(2)
        out.append(make_colorization_sample(int(g_seed), int(c_seed), size, cond_size))
    return out


def shapes_regenerations(geometry_seed: int, n_colors: int, size: int, seed: int = 0,
                         cond_size: int | None = None) -> list[ColorizationSample]:
    """Same geometry rendered with ``n_colors`` independent palette draws."""
    rng = np.random.default_rng(seed)
    return [
        make_colorization_sample(geometry_seed, int(rng.integers(0, 2 ** 31)),
                                 size, cond_size)
        for _ in range(n_colors)
    ]


# --------------------------------------------------------------------------
# Training adapters (batch samplers in flow units)
# --------------------------------------------------------------------------

AB_SCALE = 128.0    # chrominance divisor before entering the flow
L_OFFSET = 50.0
L_SCALE = 100.0


class LabeledImageDataset:
    """Class-conditional images; conditions are one-hot label vectors."""

    def __init__(self, batch: LabeledImageBatch, n_classes: int = 10):
        self.batch = batch
        self.n_classes = n_classes
        self.input_shape = batch.images.shape[1:]
        eye = np.eye(n_classes, dtype=np.float32)
        self._onehots = eye[batch.labels]

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, self.batch.n, size=batch_size)
        x = self.batch.images[idx].reshape(batch_size, -1)
        return x, self._onehots[idx]

    def normalization(self) -> dict:
        return {"kind": "mnist", "offset": self.batch.offset, "scale": self.batch.scale}


class SynthDataset:
    """On-the-fly sampler for a synthetic conditional density."""

    def __init__(self, density: SyntheticCondDensity):
        self.density = density
        self.input_shape = (density.dim,)

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        labels = rng.integers(0, self.density.n_conditions, size=batch_size)
        x = np.empty((batch_size, self.density.dim), dtype=np.float32)
        for k in range(self.density.n_conditions):
            sel = labels == k
            if sel.any():
                x[sel] = self.density.sample(k, int(sel.sum()), rng).astype(np.float32)
        eye = np.eye(self.density.n_conditions, dtype=np.float32)
        return x, eye[labels]

    def normalization(self) -> dict:
        return {"kind": "identity"}


class ToyShapesDataset:
    """Pool of colorization samples in flow units (ab/128, L centered)."""

    def __init__(self, n_pool: int, size: int, seed: int, cond_size: int | None = None):
        samples = synth_colored_shapes(n_pool, size, seed, cond_size)
        self.size = size
        self.cond_size = cond_size if cond_size is not None else 2 * size
        self.ab = np.stack([s.ab for s in samples]) / AB_SCALE
        self.L = (np.stack([s.L for s in samples]) - L_OFFSET) / L_SCALE
        self.provenance = [s.provenance for s in samples]
        self.input_shape = self.ab.shape[1:]
        self.cond_shape = self.L.shape[1:]

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, self.ab.shape[0], size=batch_size)
        return self.ab[idx].astype(np.float32), self.L[idx].astype(np.float32)

    def eval_items(self, n: int):
        n = min(n, self.ab.shape[0])
        return (self.ab[:n].astype(np.float32), self.L[:n].astype(np.float32),
                self.provenance[:n])

    def normalization(self) -> dict:
        return {"kind": "toyshapes", "ab_scale": AB_SCALE,
                "l_offset": L_OFFSET, "l_scale": L_SCALE}


# --------------------------------------------------------------------------
# Corpus export
# --------------------------------------------------------------------------

def export_corpus(samples, out_dir, kind: str = "shapes"):
    """Write a generated corpus as PNGs plus a manifest CSV."""
    import matplotlib.image

    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        if kind == "shapes":
            writer.writerow(["path", "geometry_seed", "color_seed"])
            for i, s in enumerate(samples):
                name = f"sample_{i:05d}.png"
                factor = s.L.shape[1] // s.ab.shape[1]
                up = np.repeat(np.repeat(s.ab, factor, axis=1), factor, axis=2)
                lab = np.concatenate([s.L, up], axis=0).transpose(1, 2, 0)
                rgb = lab_to_rgb(lab)
                matplotlib.image.imsave(os.path.join(out_dir, name), rgb)
                writer.writerow([name, s.provenance[0], s.provenance[1]])
        elif kind == "digits":
            images, labels = samples
            writer.writerow(["path", "label"])
            for i in range(images.shape[0]):
                name = f"digit_{i:05d}.png"
                matplotlib.image.imsave(os.path.join(out_dir, name),
                                        images[i], cmap="gray", vmin=0, vmax=255)
                writer.writerow([name, int(labels[i])])
        else:
            raise DataError(f"unknown corpus kind {kind!r}")
    return manifest
