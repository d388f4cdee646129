"""Invertible building blocks and their composition into a bijective graph.

A graph is an ordered list of nodes, each exactly invertible:

* ``CouplingBlock``   -- conditional affine coupling, the only trainable node
                         and the only log-determinant contributor
* ``OrthogonalMix``   -- fixed random orthogonal channel mixing, volume free
* ``HaarNode``        -- orthogonal 2x2 wavelet reshaping (c,H,W) -> (4c,H/2,W/2)
* ``SplitNode``       -- channels leave the flow early as part of the latent code

Tensors are batch-first: (N, D) for flat data, (N, C, H, W) for images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from condflow.errors import ConfigError, DimensionError
from condflow.numerics import tensor as T
from condflow.numerics.nets import build_subnet
from condflow.numerics.tensor import Tensor, no_grad

DEFAULT_ALPHA = 1.9


def clamp_scale(s: Tensor, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Bounded squashing of scale exponents: (2a/pi) * arctan(s/a).

    Odd and strictly monotone, with values in (-a, a), so exp() of the
    result can never overflow regardless of the raw subnet output.
    """
    if alpha <= 0:
        raise ConfigError(f"clamp alpha must be positive, got {alpha}")
    s = s if isinstance(s, Tensor) else Tensor(s)
    return T.arctan(s * (1.0 / alpha)) * (2.0 * alpha / np.pi)


def sum_except_batch(t: Tensor) -> Tensor:
    if t.ndim == 1:
        return t
    return t.sum(axis=tuple(range(1, t.ndim)))


class CouplingBlock:
    """Conditional affine coupling over the channel/feature axis.

    The input splits into contiguous halves (u1, u2). Each half is scaled
    and shifted by subnet outputs computed from the other half plus the
    conditioning features; one subnet per half emits both s and t stacked
    along the channel axis. Scale exponents pass through ``clamp_scale``
    unless clamping is disabled.
    """

    def __init__(self, split_sizes: tuple[int, int], subnet1, subnet2,
                 alpha: float = DEFAULT_ALPHA, cond_dim: int = 0,
                 clamp: bool = True):
        d1, d2 = split_sizes
        if d1 < 1 or d2 < 1:
            raise ConfigError(f"coupling halves must be non-empty, got {split_sizes}")
        if alpha <= 0:
            raise ConfigError(f"clamp alpha must be positive, got {alpha}")
        self.split_sizes = (d1, d2)
        self.subnet1 = subnet1          # (u2, cond) -> stacked (s1, t1), 2*d1 channels
        self.subnet2 = subnet2          # (v1, cond) -> stacked (s2, t2), 2*d2 channels
        self.alpha = alpha
        self.cond_dim = cond_dim
        self.clamp = clamp

    # u/v may be (N, D) or (N, C, H, W); axis 1 carries the split.
    def _split(self, x: Tensor):
        d1 = self.split_sizes[0]
        return x[:, :d1], x[:, d1:]

    def _scale_shift(self, subnet, half_dim: int, other: Tensor, cond):
        out = subnet(other, cond)
        s = out[:, :half_dim]
        t = out[:, half_dim:]
        s_hat = clamp_scale(s, self.alpha) if self.clamp else s
        return s_hat, t

    def forward(self, u: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        """Returns (v, logdet) with logdet per sample, shape (N,)."""
        d1, d2 = self.split_sizes
        if u.shape[1] != d1 + d2:
            raise DimensionError(
                f"coupling expects {d1 + d2} channels, got input shape {u.shape}")
        u1, u2 = self._split(u)
        s1, t1 = self._scale_shift(self.subnet1, d1, u2, cond)
        v1 = u1 * T.exp(s1) + t1
        s2, t2 = self._scale_shift(self.subnet2, d2, v1, cond)
        v2 = u2 * T.exp(s2) + t2
        v = T.concat([v1, v2], axis=1)
        logdet = sum_except_batch(s1) + sum_except_batch(s2)
        return v, logdet

    def inverse(self, v: Tensor, cond: Tensor | None) -> Tensor:
        d1, d2 = self.split_sizes
        if v.shape[1] != d1 + d2:
            raise DimensionError(
                f"coupling expects {d1 + d2} channels, got input shape {v.shape}")
        v1, v2 = self._split(v)
        s2, t2 = self._scale_shift(self.subnet2, d2, v1, cond)
        u2 = (v2 - t2) / T.exp(s2)
        s1, t1 = self._scale_shift(self.subnet1, d1, u2, cond)
        u1 = (v1 - t1) / T.exp(s1)
        return T.concat([u1, u2], axis=1)

    def parameters(self):
        return self.subnet1.parameters() + self.subnet2.parameters()

    def arch(self) -> dict:
        return {"kind": "coupling", "split_sizes": list(self.split_sizes),
                "alpha": self.alpha, "cond_dim": self.cond_dim,
                "clamp": self.clamp, "subnet1": self.subnet1.arch(),
                "subnet2": self.subnet2.arch()}


def coupling_forward(u: Tensor, cond: Tensor | None, block: CouplingBlock):
    return block.forward(u, cond)


def coupling_inverse(v: Tensor, cond: Tensor | None, block: CouplingBlock) -> Tensor:
    return block.inverse(v, cond)


def orthogonal_init(dim: int, seed: int, dtype=np.float32) -> np.ndarray:
    """Deterministic random orthogonal matrix from a seeded QR factorization.

    Columns are sign-normalized so the diagonal of R is positive, making the
    result unique for a given seed.
    """
    if dim < 1:
        raise ConfigError(f"orthogonal matrix dimension must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(a)
    q = q * np.where(np.diag(r) >= 0, 1.0, -1.0)
    return q.astype(dtype)


class OrthogonalMix:
    """Fixed orthogonal mixing across channels; never trained.

    On image tensors it acts per pixel (a fixed 1x1 convolution).
    """

    def __init__(self, dim: int, seed: int, dtype=np.float32):
        self.dim = dim
        self.seed = seed
        self.q = orthogonal_init(dim, seed, dtype)

    def _apply(self, x: Tensor, mat: np.ndarray) -> Tensor:
        if x.shape[1] != self.dim:
            raise DimensionError(
                f"mix expects {self.dim} channels, got input shape {x.shape}")
        m = Tensor(mat.astype(x.data.dtype, copy=False))
        if x.ndim == 2:
            return T.matmul(x, m.T)
        if x.ndim == 4:
            n, c, h, w = x.shape
            flat = x.transpose((0, 2, 3, 1)).reshape((n * h * w, c))
            mixed = T.matmul(flat, m.T)
            return mixed.reshape((n, h, w, c)).transpose((0, 3, 1, 2))
        raise DimensionError(f"mix supports 2-D or 4-D tensors, got {x.shape}")

    def forward(self, u: Tensor) -> Tensor:
        return self._apply(u, self.q)

    def inverse(self, v: Tensor) -> Tensor:
        return self._apply(v, self.q.T)

    def arch(self) -> dict:
        return {"kind": "mix", "dim": self.dim, "seed": self.seed}


def mix_forward(u: Tensor, mix: OrthogonalMix) -> Tensor:
    return mix.forward(u)


def mix_inverse(v: Tensor, mix: OrthogonalMix) -> Tensor:
    return mix.inverse(v)


class HaarNode:
    """Orthogonal wavelet downsampling (c, H, W) -> (4c, H/2, W/2).

    Per 2x2 patch (p11, p12, p21, p22) the four output channels are
    average a, horizontal h, vertical v and diagonal d derivatives, each
    half the signed patch sum. Outputs group as (a, h, v, d) per input
    channel. The 4x4 kernel is half a Hadamard matrix, hence orthogonal and
    volume-preserving.
    """

    def __init__(self, channels_in: int):
        if channels_in < 1:
            raise ConfigError("haar node needs at least one channel")
        self.channels_in = channels_in

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise DimensionError(f"haar expects (N, C, H, W), got {x.shape}")
        n, c, h, w = x.shape
        if c != self.channels_in:
            raise DimensionError(f"haar built for {self.channels_in} channels, got {c}")
        if h % 2 or w % 2:
            raise DimensionError(f"haar needs even spatial extents, got {h}x{w}")
        ho, wo = h // 2, w // 2
        # (N,C,H,W) -> (N,C,ho,2,wo,2) -> patches (N,C,ho,wo,2,2)
        patches = x.reshape((n, c, ho, 2, wo, 2)).transpose((0, 1, 2, 4, 3, 5))
        p11 = patches[:, :, :, :, 0, 0]
        p12 = patches[:, :, :, :, 0, 1]
        p21 = patches[:, :, :, :, 1, 0]
        p22 = patches[:, :, :, :, 1, 1]
        a = (p11 + p12 + p21 + p22) * 0.5
        hh = (p11 - p12 + p21 - p22) * 0.5
        vv = (p11 + p12 - p21 - p22) * 0.5
        dd = (p11 - p12 - p21 + p22) * 0.5
        stack = T.concat([
            comp.reshape((n, c, 1, ho, wo)) for comp in (a, hh, vv, dd)
        ], axis=2)
        return stack.reshape((n, 4 * c, ho, wo))

    def inverse(self, y: Tensor) -> Tensor:
        if y.ndim != 4:
            raise DimensionError(f"haar inverse expects (N, C, H, W), got {y.shape}")
        n, c4, ho, wo = y.shape
        if c4 != 4 * self.channels_in:
            raise DimensionError(
                f"haar inverse built for {4 * self.channels_in} channels, got {c4}")
        c = self.channels_in
        groups = y.reshape((n, c, 4, ho, wo))
        a = groups[:, :, 0]
        hh = groups[:, :, 1]
        vv = groups[:, :, 2]
        dd = groups[:, :, 3]
        p11 = (a + hh + vv + dd) * 0.5
        p12 = (a - hh + vv - dd) * 0.5
        p21 = (a + hh - vv - dd) * 0.5
        p22 = (a - hh - vv + dd) * 0.5
        patches = T.concat([
            comp.reshape((n, c, ho, wo, 1)) for comp in (p11, p12, p21, p22)
        ], axis=4)
        patches = patches.reshape((n, c, ho, wo, 2, 2))
        return patches.transpose((0, 1, 2, 4, 3, 5)).reshape((n, c, 2 * ho, 2 * wo))

    @staticmethod
    def kernel_matrix() -> np.ndarray:
        """The 4x4 patch-to-components matrix, rows (a, h, v, d)."""
        return 0.5 * np.array([
            [1, 1, 1, 1],
            [1, -1, 1, -1],
            [1, 1, -1, -1],
            [1, -1, -1, 1],
        ], dtype=np.float64)

    def arch(self) -> dict:
        return {"kind": "haar", "channels_in": self.channels_in}


def haar_forward(x: Tensor, channels_in: int | None = None) -> Tensor:
    node = HaarNode(channels_in if channels_in is not None else x.shape[1])
    return node.forward(x)


def haar_inverse(y: Tensor, channels_in: int | None = None) -> Tensor:
    node = HaarNode(channels_in if channels_in is not None else y.shape[1] // 4)
    return node.inverse(y)


class SplitNode:
    """Channels leave the flow: first ``keep`` pass on, the rest emit as z."""

    def __init__(self, keep: int, emit: int):
        if keep < 1 or emit < 1:
            raise ConfigError(f"split needs keep >= 1 and emit >= 1, got {keep}/{emit}")
        self.keep = keep
        self.emit = emit

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.keep + self.emit:
            raise DimensionError(
                f"split expects {self.keep + self.emit} channels, got {x.shape}")
        return x[:, :self.keep], x[:, self.keep:]

    def inverse(self, kept: Tensor, emitted: Tensor) -> Tensor:
        return T.concat([kept, emitted], axis=1)

    def arch(self) -> dict:
        return {"kind": "split", "keep": self.keep, "emit": self.emit}


@dataclass
class LatentCode:
    """Latent output of a graph: split-off parts in emission order, the
    graph remainder last. Total dimension equals the input dimension."""

    parts: list

    def part_arrays(self) -> list[np.ndarray]:
        return [p.data if isinstance(p, Tensor) else np.asarray(p) for p in self.parts]

    def to_flat(self) -> np.ndarray:
        arrs = self.part_arrays()
        n = arrs[0].shape[0]
        return np.concatenate([a.reshape(n, -1) for a in arrs], axis=1)

    def norm_sq(self) -> Tensor:
        """Per-sample squared norm across all parts, differentiable."""
        total = None
        for p in self.parts:
            p = p if isinstance(p, Tensor) else Tensor(p)
            contrib = sum_except_batch(T.square(p))
            total = contrib if total is None else total + contrib
        return total

    @property
    def total_dim(self) -> int:
        return sum(int(np.prod(a.shape[1:])) for a in self.part_arrays())


class FlowGraph:
    """Ordered invertible nodes defining f(x; c) and its inverse."""

    NODE_TYPES = (CouplingBlock, OrthogonalMix, HaarNode, SplitNode)

    def __init__(self, nodes: list, input_shape: tuple[int, ...]):
        for node in nodes:
            if not isinstance(node, self.NODE_TYPES):
                raise ConfigError(f"unsupported graph node {type(node).__name__}")
        self.nodes = list(nodes)
        self.input_shape = tuple(input_shape)
        self.latent_layout = self._trace_shapes()

    def _trace_shapes(self) -> list[tuple[int, ...]]:
        """Walk node contracts to derive per-sample latent part shapes."""
        shape = self.input_shape
        layout: list[tuple[int, ...]] = []
        for node in self.nodes:
            if isinstance(node, CouplingBlock):
                d = shape[0]
                if d != sum(node.split_sizes):
                    raise ConfigError(
                        f"coupling split {node.split_sizes} does not cover {shape}")
                if d < 2:
                    raise ConfigError("coupling needs input dimension >= 2")
            elif isinstance(node, OrthogonalMix):
                if shape[0] != node.dim:
                    raise ConfigError(f"mix dim {node.dim} does not match {shape}")
            elif isinstance(node, HaarNode):
                if len(shape) != 3:
                    raise ConfigError("haar node requires (C, H, W) data")
                c, h, w = shape
                if c != node.channels_in or h % 2 or w % 2:
                    raise ConfigError(f"haar node incompatible with shape {shape}")
                shape = (4 * c, h // 2, w // 2)
            elif isinstance(node, SplitNode):
                if shape[0] != node.keep + node.emit:
                    raise ConfigError(
                        f"split {node.keep}+{node.emit} does not cover {shape}")
                layout.append((node.emit,) + shape[1:])
                shape = (node.keep,) + shape[1:]
        layout.append(shape)
        total = sum(int(np.prod(s)) for s in layout)
        if total != int(np.prod(self.input_shape)):
            raise ConfigError("latent dimension does not match input dimension")
        return layout

    @property
    def coupling_blocks(self) -> list[CouplingBlock]:
        return [n for n in self.nodes if isinstance(n, CouplingBlock)]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def parameters(self):
        return [p for block in self.coupling_blocks for p in block.parameters()]

    def forward(self, x, cond_features: list | None = None) -> tuple[LatentCode, Tensor]:
        """Run all nodes; returns (latent code, per-sample logdet)."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[1:] != self.input_shape:
            raise DimensionError(
                f"graph input shape {h.shape[1:]} != declared {self.input_shape}")
        couplings = self.coupling_blocks
        feats = cond_features if cond_features is not None else [None] * len(couplings)
        if len(feats) != len(couplings):
            raise DimensionError(
                f"need {len(couplings)} conditioning features, got {len(feats)}")
        n = h.shape[0]
        logdet = Tensor(np.zeros(n, dtype=h.data.dtype))
        parts: list[Tensor] = []
        ci = 0
        for node in self.nodes:
            if isinstance(node, CouplingBlock):
                h, ld = node.forward(h, feats[ci])
                logdet = logdet + ld
                ci += 1
            elif isinstance(node, OrthogonalMix):
                h = node.forward(h)
            elif isinstance(node, HaarNode):
                h = node.forward(h)
            else:
                h, emitted = node.forward(h)
                parts.append(emitted)
        parts.append(h)
        return LatentCode(parts), logdet

    def inverse(self, z, cond_features: list | None = None) -> np.ndarray:
        """Map a latent code back to data space (no gradients recorded)."""
        if isinstance(z, LatentCode):
            arrays = z.part_arrays()
        else:
            arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in z]
        if len(arrays) != len(self.latent_layout):
            raise DimensionError(
                f"latent code has {len(arrays)} parts, layout needs "
                f"{len(self.latent_layout)}")
        for arr, shape in zip(arrays, self.latent_layout):
            if arr.shape[1:] != shape:
                raise DimensionError(
                    f"latent part shape {arr.shape[1:]} != layout {shape}")
        couplings = self.coupling_blocks
        feats = cond_features if cond_features is not None else [None] * len(couplings)
        if len(feats) != len(couplings):
            raise DimensionError(
                f"need {len(couplings)} conditioning features, got {len(feats)}")
        with no_grad():
            h = Tensor(arrays[-1])
            next_part = len(arrays) - 2
            ci = len(couplings) - 1
            for node in reversed(self.nodes):
                if isinstance(node, CouplingBlock):
                    h = node.inverse(h, feats[ci])
                    ci -= 1
                elif isinstance(node, OrthogonalMix):
                    h = node.inverse(h)
                elif isinstance(node, HaarNode):
                    h = node.inverse(h)
                else:
                    h = node.inverse(h, Tensor(arrays[next_part]))
                    next_part -= 1
        return h.data

    def split_flat(self, z_flat: np.ndarray) -> list[np.ndarray]:
        """Slice a flat (N, D) latent matrix into layout-shaped parts."""
        n, d = z_flat.shape
        if d != self.input_dim:
            raise DimensionError(f"flat latent dim {d} != {self.input_dim}")
        parts = []
        offset = 0
        for shape in self.latent_layout:
            size = int(np.prod(shape))
            parts.append(z_flat[:, offset:offset + size].reshape((n,) + shape))
            offset += size
        return parts

    def arch(self) -> dict:
        return {"input_shape": list(self.input_shape),
                "nodes": [node.arch() for node in self.nodes]}


def graph_forward(graph: FlowGraph, x, cond_features=None):
    return graph.forward(x, cond_features)


def graph_inverse(graph: FlowGraph, z, cond_features=None):
    return graph.inverse(z, cond_features)


def build_graph_from_arch(arch: dict, dtype=np.float32) -> FlowGraph:
    """Rebuild a graph skeleton (no parameter values) from its header."""
    nodes = []
    for i, spec in enumerate(arch["nodes"]):
        kind = spec["kind"]
        if kind == "coupling":
            sub1 = build_subnet(spec["subnet1"], name=f"node{i}.sub1", dtype=dtype)
            sub2 = build_subnet(spec["subnet2"], name=f"node{i}.sub2", dtype=dtype)
            nodes.append(CouplingBlock(tuple(spec["split_sizes"]), sub1, sub2,
                                       alpha=spec["alpha"], cond_dim=spec["cond_dim"],
                                       clamp=spec["clamp"]))
        elif kind == "mix":
            nodes.append(OrthogonalMix(spec["dim"], spec["seed"], dtype=dtype))
        elif kind == "haar":
            nodes.append(HaarNode(spec["channels_in"]))
        elif kind == "split":
            nodes.append(SplitNode(spec["keep"], spec["emit"]))
        else:
            raise ConfigError(f"unknown node kind {kind!r} in architecture header")
    return FlowGraph(nodes, tuple(arch["input_shape"]))
