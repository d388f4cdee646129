"""Model assembly: a flow graph paired with its conditioning stack, plus the
preset builders for the three tasks and header-based reconstruction."""

from __future__ import annotations

import numpy as np

from condflow.conditioning import (
    ConditioningStack,
    ConvEncoder,
    ConvHead,
    build_stack_from_arch,
    passthrough_stack,
)
from condflow.errors import ConfigError
from condflow.flow_core import (
    CouplingBlock,
    FlowGraph,
    HaarNode,
    LatentCode,
    OrthogonalMix,
    SplitNode,
    build_graph_from_arch,
)
from condflow.numerics.nets import ConvNet, MLP
from condflow.numerics.tensor import no_grad

_DTYPES = {"float32": np.float32, "float64": np.float64}


class FlowModel:
    """Bijective graph + conditioning stack + bookkeeping metadata."""

    def __init__(self, graph: FlowGraph, stack: ConditioningStack, meta: dict):
        if stack.n_blocks != len(graph.coupling_blocks):
            raise ConfigError(
                f"stack has {stack.n_blocks} heads for {len(graph.coupling_blocks)} blocks")
        self.graph = graph
        self.stack = stack
        self.meta = dict(meta)

    @property
    def input_dim(self) -> int:
        return self.graph.input_dim

    @property
    def dtype(self):
        return _DTYPES[self.meta.get("dtype", "float32")]

    def parameters(self):
        return self.graph.parameters() + self.stack.parameters()

    def encode(self, x, c_raw, cache_key=None):
        """f(x; c): returns (LatentCode, per-sample logdet), grad-recorded."""
        feats = self.stack.features(c_raw, cache_key=cache_key)
        return self.graph.forward(x, feats)

    def encode_with_logdet(self, x, c_raw) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode encoding: (flat latents, per-sample logdet).

        Uses running normalization statistics so it agrees exactly with
        ``decode`` (encode/decode must see identical conditioning features
        to invert each other).
        """
        was_training = self._set_eval()
        try:
            with no_grad():
                z, logdet = self.encode(x, c_raw)
            return z.to_flat(), logdet.data
        finally:
            self.stack.set_training(was_training)

    def encode_flat(self, x, c_raw) -> np.ndarray:
        """Latent matrix (N, D): inference mode, no gradients recorded."""
        return self.encode_with_logdet(x, c_raw)[0]

    def decode(self, z, c_raw) -> np.ndarray:
        """g(z; c): latent parts (or flat matrix) back to data space."""
        was_training = self._set_eval()
        try:
            if isinstance(z, np.ndarray) and z.ndim == 2:
                z = self.graph.split_flat(z)
            with no_grad():
                feats = self.stack.features(c_raw)
            return self.graph.inverse(z, feats)
        finally:
            self.stack.set_training(was_training)

    def _set_eval(self) -> bool:
        heads = [h for h in self.stack.heads if h is not None]
        was_training = heads[0].norm.training if heads else False
        self.stack.set_training(False)
        return was_training

    def sample(self, c_raw, rng: np.random.Generator, beta: float | None = None):
        """Draw z from the prior (optionally norm-rescaled) and decode."""
        n = np.asarray(c_raw).shape[0]
        d = self.input_dim
        z = rng.standard_normal((n, d)).astype(self.dtype)
        if beta is not None:
            norms = np.linalg.norm(z, axis=1, keepdims=True)
            z = np.where(norms > 0, z / np.maximum(norms, 1e-12), z) * (
                beta * np.sqrt(d))
        return self.decode(z, c_raw)

    # -- serialization ------------------------------------------------------

    def header(self) -> dict:
        return {
            **self.meta,
            "arch": {"graph": self.graph.arch(), "stack": self.stack.arch()},
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p in self.parameters():
            if not p.name:
                raise ConfigError("unnamed parameter cannot be serialized")
            if p.name in out:
                raise ConfigError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p.data
        for key, arr in self.stack.state_arrays().items():
            out[f"state.{key}"] = arr
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]):
        from condflow.errors import CheckpointShapeError

        state_keys = {}
        for p in self.parameters():
            if p.name not in tensors:
                raise CheckpointShapeError(f"missing tensor {p.name!r}")
            arr = tensors[p.name]
            if arr.shape != p.shape:
                raise CheckpointShapeError(
                    f"tensor {p.name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(p.data.dtype)
            p.zero_grad()
        for key in self.stack.state_arrays():
            full = f"state.{key}"
            if full not in tensors:
                raise CheckpointShapeError(f"missing tensor {full!r}")
            state_keys[key] = tensors[full]
        if state_keys:
            self.stack.load_state_arrays(state_keys)


def model_from_header(header: dict) -> FlowModel:
    """Rebuild an uninitialized model skeleton from a checkpoint header."""
    dtype = _DTYPES[header.get("dtype", "float32")]
    graph = build_graph_from_arch(header["arch"]["graph"], dtype=dtype)
    stack = build_stack_from_arch(header["arch"]["stack"], dtype=dtype)
    meta = {k: v for k, v in header.items() if k != "arch"}
    return FlowModel(graph, stack, meta)


# --------------------------------------------------------------------------
# Preset builders
# --------------------------------------------------------------------------

def _pair_split(dim: int) -> tuple[int, int]:
    if dim < 2:
        raise ConfigError(f"coupling input dimension must be >= 2, got {dim}")
    return dim // 2, dim - dim // 2


def build_vector_model(dim: int, n_conditions: int, n_blocks: int = 10,
                       hidden: int = 48, n_hidden: int = 2, seed: int = 0,
                       alpha: float = 1.9, clamp: bool = True,
                       permute: bool = True, task: str = "synth",
                       precision: str = "float32",
                       normalization: dict | None = None) -> FlowModel:
    """Fully connected conditional flow over flat vectors, one-hot conditions."""
    dtype = _DTYPES[precision]
    d1, d2 = _pair_split(dim)
    nodes = []
    for i in range(n_blocks):
        sub1 = MLP(d2, hidden, 2 * d1, cond_dim=n_conditions, n_hidden=n_hidden,
                   name=f"node{len(nodes)}.sub1", dtype=dtype)
        sub2 = MLP(d1, hidden, 2 * d2, cond_dim=n_conditions, n_hidden=n_hidden,
                   name=f"node{len(nodes)}.sub2", dtype=dtype)
        nodes.append(CouplingBlock((d1, d2), sub1, sub2, alpha=alpha,
                                   cond_dim=n_conditions, clamp=clamp))
        if permute:
            nodes.append(OrthogonalMix(dim, seed=seed * 1009 + 7919 * (i + 1),
                                       dtype=dtype))
    graph = FlowGraph(nodes, (dim,))
    stack = passthrough_stack(n_blocks, (n_conditions,))
    meta = {"task": task, "dtype": precision, "n_conditions": n_conditions,
            "normalization": normalization or {"kind": "identity"},
            "cond_kind": "one_hot"}
    return FlowModel(graph, stack, meta)


def build_mnist_model(n_blocks: int = 24, hidden: int = 512, seed: int = 0,
                      alpha: float = 1.9, clamp: bool = True, permute: bool = True,
                      image_shape: tuple[int, int] = (28, 28),
                      precision: str = "float32") -> FlowModel:
    """Label-conditional flow over flattened digit images.

    Fully connected coupling blocks receive the one-hot class vector
    directly; no feature network is involved.
    """
    dim = image_shape[0] * image_shape[1]
    model = build_vector_model(dim, 10, n_blocks=n_blocks, hidden=hidden,
                               seed=seed, alpha=alpha, clamp=clamp,
                               permute=permute, task="mnist", precision=precision,
                               normalization={"kind": "mnist", "offset": 0.5,
                                              "scale": 1.0})
    model.meta["image_shape"] = list(image_shape)
    return model


def build_toyshapes_model(size: int = 32, cond_size: int | None = None,
                          blocks_per_stage: tuple[int, ...] = (2, 2, 2),
                          hidden_ch: int = 12, cond_ch: int = 8,
                          encoder_ch: int = 16, seed: int = 0,
                          alpha: float = 1.9, clamp: bool = True,
                          permute: bool = True, use_haar: bool = True,
                          split_off: bool = True,
                          precision: str = "float32") -> FlowModel:
    """Multi-resolution convolutional flow over chrominance (a, b) planes.

    Condition: the luminance plane at twice the target resolution, encoded
    by a small strided conv net trained jointly; each coupling block gets
    its own head matched to its resolution stage.
    """
    dtype = _DTYPES[precision]
    cond_size = cond_size if cond_size is not None else 2 * size
    if cond_size % 2:
        raise ConfigError("condition size must be even")
    nodes = []
    head_specs: list[tuple[int, int]] = []   # (n_halvings from encoder res, res)
    enc_res = cond_size // 2                 # encoder halves the condition once
    if enc_res != size:
        raise ConfigError("encoder output resolution must match the target size")

    ch, res = 2, size
    mix_seed = seed * 2003 + 1

    def add_stage(n_blocks: int):
        nonlocal mix_seed
        d1, d2 = _pair_split(ch)
        halvings = int(np.log2(enc_res // res))
        for _ in range(n_blocks):
            i = len(nodes)
            sub1 = ConvNet(d2, hidden_ch, 2 * d1, cond_ch=cond_ch,
                           name=f"node{i}.sub1", dtype=dtype)
            sub2 = ConvNet(d1, hidden_ch, 2 * d2, cond_ch=cond_ch,
                           name=f"node{i}.sub2", dtype=dtype)
            nodes.append(CouplingBlock((d1, d2), sub1, sub2, alpha=alpha,
                                       cond_dim=cond_ch, clamp=clamp))
            head_specs.append((halvings, res))
            if permute:
                nodes.append(OrthogonalMix(ch, seed=mix_seed, dtype=dtype))
                mix_seed += 1

    n_stages = len(blocks_per_stage) if use_haar else 1
    for stage, n_blocks in enumerate(blocks_per_stage[:n_stages]):
        add_stage(n_blocks)
        last_stage = stage == n_stages - 1
        if use_haar and not last_stage:
            nodes.append(HaarNode(ch))
            ch, res = 4 * ch, res // 2
            if split_off and ch >= 4:
                nodes.append(SplitNode(ch // 2, ch - ch // 2))
                ch = ch // 2

    graph = FlowGraph(nodes, (2, size, size))
    encoder = ConvEncoder(1, encoder_ch, encoder_ch, n_halvings=1, n_flat=1,
                          name="encoder", dtype=dtype)
    heads = []
    specs = []
    for k, (halvings, r) in enumerate(head_specs):
        heads.append(ConvHead(encoder_ch, cond_ch, halvings, name=f"head{k}",
                              dtype=dtype))
        specs.append((cond_ch, r, r))
    stack = ConditioningStack(encoder, heads, specs)
    meta = {"task": "toyshapes", "dtype": precision,
            "normalization": {"kind": "toyshapes", "ab_scale": 128.0,
                              "l_offset": 50.0, "l_scale": 100.0},
            "cond_kind": "luminance", "size": size, "cond_size": cond_size}
    return FlowModel(graph, stack, meta)
