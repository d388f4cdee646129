"""Metrics and latent-space tooling: bits/dim, best-of-k MSE, sample
variance, PCA latent axes, temperature-scaled sampling, style transfer."""

from __future__ import annotations

import dataclasses
import hashlib
import json

import numpy as np

from condflow.errors import ConfigError, DegenerateDataError, DimensionError
from condflow.model import FlowModel
from condflow.training import LN_2PI

LN2 = float(np.log(2.0))


@dataclasses.dataclass
class EvalReport:
    task: str
    n_samples: int
    k: int
    seed: int
    model_checksum: str
    nll_per_dim: float | None = None
    bits_per_dim: float | None = None
    best_of_k_mse: float | None = None
    pixel_variance: float | None = None
    notes: dict = dataclasses.field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def model_checksum(model: FlowModel) -> str:
    """Stable digest over parameter values and architecture."""
    digest = hashlib.sha256()
    digest.update(json.dumps(model.header(), sort_keys=True).encode())
    tensors = model.state_tensors()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return digest.hexdigest()[:16]


def bits_per_dim(z_flat: np.ndarray, logdet: np.ndarray, dim: int) -> float:
    """Full negative log-likelihood per dimension, in bits.

    Includes the (D/2) ln 2 pi prior constant that the training loss omits,
    so the value is comparable across models and to analytic entropies.
    """
    if dim < 1:
        raise ConfigError("dimension must be >= 1")
    z_flat = np.atleast_2d(np.asarray(z_flat))
    logdet = np.asarray(logdet).reshape(-1)
    nll = 0.5 * (z_flat ** 2).sum(axis=1) + 0.5 * dim * LN_2PI - logdet
    return float(nll.mean() / (dim * LN2))


def nll_nats(z_flat: np.ndarray, logdet: np.ndarray, dim: int) -> float:
    """Full NLL in nats (batch mean), same constant convention as above."""
    return bits_per_dim(z_flat, logdet, dim) * dim * LN2


def best_of_k_mse(ground_truth: np.ndarray, samples: np.ndarray) -> float:
    """Mean over items of the best per-pixel MSE among k generations.

    ``ground_truth``: (M, ...); ``samples``: (M, k, ...).
    """
    gt = np.asarray(ground_truth, dtype=np.float64)
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != gt.ndim + 1 or s.shape[0] != gt.shape[0] or s.shape[2:] != gt.shape[1:]:
        raise DimensionError(
            f"samples shape {s.shape} incompatible with ground truth {gt.shape}")
    if s.shape[1] < 1:
        raise ConfigError("need at least one sample per item")
    per = ((s - gt[:, None]) ** 2).reshape(s.shape[0], s.shape[1], -1).mean(axis=2)
    return float(per.min(axis=1).mean())


def sample_variance(samples: np.ndarray) -> float:
    """Population variance across the k generations, averaged over items,
    pixels and channels."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim < 2 or s.shape[1] < 2:
        raise ConfigError("sample variance needs k >= 2 generations per item")
    return float(s.var(axis=1).mean())


@dataclasses.dataclass
class PCAResult:
    mean: np.ndarray                 # (D,)
    components: np.ndarray           # (D, D) rows sorted by variance
    explained_variance: np.ndarray   # (D,)

    def project(self, z: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(z) - self.mean) @ self.components.T

    def reconstruct(self, coords: np.ndarray) -> np.ndarray:
        return np.atleast_2d(coords) @ self.components + self.mean

    def walk(self, component: int, scales) -> np.ndarray:
        """Latent points along one principal direction, scaled in units of
        that component's standard deviation."""
        sigma = float(np.sqrt(self.explained_variance[component]))
        return np.stack([
            self.mean + s * sigma * self.components[component] for s in scales
        ])


def latent_pca(latents: np.ndarray) -> PCAResult:
    """Principal axes of a latent sample matrix (N, D), variance-sorted.

    Latents should be computed without noise augmentation. Components carry
    a deterministic sign (largest-magnitude coordinate positive).
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise DimensionError("latent_pca expects an (N, D) matrix with N > 1")
    mean = z.mean(axis=0)
    centered = z - mean
    total_var = centered.var(axis=0, ddof=1).sum()
    if total_var <= 0:
        raise DegenerateDataError("latents have zero variance")
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    explained = svals ** 2 / (z.shape[0] - 1)
    signs = np.sign(vt[np.arange(vt.shape[0]), np.argmax(np.abs(vt), axis=1)])
    signs[signs == 0] = 1.0
    return PCAResult(mean=mean, components=vt * signs[:, None],
                     explained_variance=explained)


def temperature_sample(model: FlowModel, c_raw: np.ndarray, beta: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Decode a latent draw rescaled to the typical norm times beta.

    A standard normal z has E||z||^2 = D, so rescaling to ||z|| = beta *
    sqrt(D) sweeps from the prototype (beta = 0) through typical samples
    (beta = 1) to oversaturated ones (beta > 1).
    """
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    n = np.asarray(c_raw).shape[0]
    d = model.input_dim
    z = rng.standard_normal((n, d))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.maximum(norms, 1e-12) * (beta * np.sqrt(d))
    return model.decode(z.astype(model.dtype), c_raw)


def style_transfer(model: FlowModel, x: np.ndarray, c_raw: np.ndarray,
                   c_hat_raw: np.ndarray) -> np.ndarray:
    """Encode under the original condition, decode under the new one."""
    z = model.encode_flat(x, c_raw)
    return model.decode(z, c_hat_raw)


def ab_saturation(ab_norm: np.ndarray, ab_scale: float = 128.0) -> float:
    """Mean chroma sqrt(a^2 + b^2) of normalized (N, 2, H, W) outputs, in
    Lab units."""
    ab = np.asarray(ab_norm, dtype=np.float64) * ab_scale
    chroma = np.sqrt(ab[:, 0] ** 2 + ab[:, 1] ** 2)
    return float(chroma.mean())
