"""Conditioning pathway: raw conditions, the shared feature network h, and
per-coupling-block heads producing each block's specialized features."""

from __future__ import annotations

import numpy as np

from condflow.errors import ConfigError, DimensionError
from condflow.numerics import tensor as T
from condflow.numerics.nets import BatchNorm2d, Conv2d
from condflow.numerics.tensor import Tensor


def one_hot(label: int, n_classes: int, dtype=np.float32) -> np.ndarray:
    """Indicator vector of length ``n_classes`` with a 1 at ``label``."""
    label = int(label)
    if not 0 <= label < n_classes:
        raise ConfigError(f"label {label} outside [0, {n_classes})")
    vec = np.zeros(n_classes, dtype=dtype)
    vec[label] = 1.0
    return vec


def one_hot_batch(labels, n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


class ConvEncoder:
    """Small strided conv net turning the raw condition image into shared
    features, trained jointly with the flow (no pretraining)."""

    def __init__(self, in_ch: int, hidden: int, out_ch: int, n_halvings: int = 1,
                 n_flat: int = 1, slope: float = 0.01, name: str = "encoder",
                 dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.slope = slope
        self.n_halvings = n_halvings
        self.n_flat = n_flat
        self.layers = []
        ch = in_ch
        idx = 0
        for _ in range(n_halvings):
            self.layers.append(Conv2d(ch, hidden, kernel=3, stride=2, padding=1,
                                      name=f"{name}.conv{idx}", dtype=dtype))
            ch = hidden
            idx += 1
        for i in range(n_flat):
            out = out_ch if i == n_flat - 1 else hidden
            self.layers.append(Conv2d(ch, out, kernel=3, stride=1, padding=1,
                                      name=f"{name}.conv{idx}", dtype=dtype))
            ch = out
            idx += 1

    def __call__(self, c: Tensor) -> Tensor:
        h = c
        for layer in self.layers[:-1]:
            h = T.leaky_relu(layer(h), self.slope)
        return T.leaky_relu(self.layers[-1](h), self.slope)

    def init_xavier(self, rng):
        for layer in self.layers:
            layer.init_xavier(rng)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def arch(self) -> dict:
        return {"kind": "conv_encoder", "in_ch": self.in_ch,
                "hidden": self.layers[0].out_ch, "out_ch": self.out_ch,
                "n_halvings": self.n_halvings, "n_flat": self.n_flat,
                "slope": self.slope}


class ConvHead:
    """Per-block head: strided 3x3 convolutions down to the block's
    resolution, a channel-setting stride-1 convolution, then batch norm."""

    def __init__(self, in_ch: int, out_ch: int, n_halvings: int,
                 slope: float = 0.01, name: str = "head", dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.n_halvings = n_halvings
        self.slope = slope
        self.convs = []
        ch = in_ch
        for i in range(n_halvings):
            self.convs.append(Conv2d(ch, in_ch, kernel=3, stride=2, padding=1,
                                     name=f"{name}.down{i}", dtype=dtype))
            ch = in_ch
        self.convs.append(Conv2d(ch, out_ch, kernel=3, stride=1, padding=1,
                                 name=f"{name}.out", dtype=dtype))
        self.norm = BatchNorm2d(out_ch, name=f"{name}.norm", dtype=dtype)

    def __call__(self, features: Tensor) -> Tensor:
        h = features
        for conv in self.convs[:-1]:
            h = T.leaky_relu(conv(h), self.slope)
        h = self.convs[-1](h)
        return self.norm(h)

    def init_xavier(self, rng):
        for conv in self.convs:
            conv.init_xavier(rng)

    def parameters(self):
        return [p for conv in self.convs for p in conv.parameters()] + \
            self.norm.parameters()

    def arch(self) -> dict:
        return {"kind": "conv_head", "in_ch": self.in_ch, "out_ch": self.out_ch,
                "n_halvings": self.n_halvings, "slope": self.slope}


class ConditioningStack:
    """Feature network plus one head per coupling block.

    ``encoder=None`` and all-``None`` heads make a pass-through stack: every
    block receives the raw condition unchanged (the label-conditional MNIST
    setup). The encoder runs once per call regardless of how many heads
    consume its output; ``encoder_calls`` counts evaluations so tests can
    assert that.
    """

    def __init__(self, encoder, heads: list, output_specs: list):
        if len(heads) != len(output_specs):
            raise ConfigError("one output spec per head is required")
        self.encoder = encoder
        self.heads = list(heads)
        self.output_specs = [tuple(s) for s in output_specs]
        self.mode = "joint"
        self.encoder_calls = 0
        self._cache_key = None
        self._cache_value = None

    @property
    def n_blocks(self) -> int:
        return len(self.heads)

    def set_training(self, training: bool):
        for head in self.heads:
            if head is not None:
                head.norm.training = training

    def invalidate_cache(self):
        self._cache_key = None
        self._cache_value = None

    def features(self, c_raw, cache_key=None) -> list[Tensor]:
        """Per-block conditioning features for a batch of raw conditions.

        The shared encoder is evaluated exactly once; results may be reused
        across calls via ``cache_key`` (callers must invalidate after any
        parameter update).
        """
        if cache_key is not None and cache_key == self._cache_key:
            return self._cache_value
        c = c_raw if isinstance(c_raw, Tensor) else Tensor(c_raw)
        if self.encoder is not None:
            shared = self.encoder(c)
            self.encoder_calls += 1
        else:
            shared = c
        outputs = []
        for head, spec in zip(self.heads, self.output_specs):
            feat = head(shared) if head is not None else shared
            if feat.shape[1:] != spec:
                raise DimensionError(
                    f"head produced {feat.shape[1:]}, declared spec {spec}")
            outputs.append(feat)
        if cache_key is not None:
            self._cache_key = cache_key
            self._cache_value = outputs
        return outputs

    def encoder_parameters(self):
        return self.encoder.parameters() if self.encoder is not None else []

    def head_parameters(self):
        return [p for h in self.heads if h is not None for p in h.parameters()]

    def parameters(self):
        return self.encoder_parameters() + self.head_parameters()

    def state_arrays(self) -> dict:
        out = {}
        for i, head in enumerate(self.heads):
            if head is not None:
                for key, arr in head.norm.state_arrays().items():
                    out[f"head{i}.norm.{key}"] = arr
        return out

    def load_state_arrays(self, state: dict):
        for i, head in enumerate(self.heads):
            if head is None:
                continue
            head.norm.running_mean = state[f"head{i}.norm.running_mean"].copy()
            head.norm.running_var = state[f"head{i}.norm.running_var"].copy()

    def arch(self) -> dict:
        return {
            "encoder": self.encoder.arch() if self.encoder is not None else None,
            "heads": [h.arch() if h is not None else None for h in self.heads],
            "output_specs": [list(s) for s in self.output_specs],
        }


def joint_gradient_flag(stack: ConditioningStack, mode: str) -> ConditioningStack:
    """Select whether the shared feature network trains.

    ``frozen`` blocks parameter updates to the encoder (heads always train);
    ``joint`` trains everything.
    """
    if mode not in ("frozen", "joint"):
        raise ConfigError(f"gradient mode must be 'frozen' or 'joint', got {mode!r}")
    stack.mode = mode
    return stack


def condition_features(c_raw, stack: ConditioningStack, cache_key=None) -> list[Tensor]:
    return stack.features(c_raw, cache_key=cache_key)


def passthrough_stack(n_blocks: int, cond_shape: tuple[int, ...]) -> ConditioningStack:
    """Stack with no feature network: the raw condition feeds every block."""
    return ConditioningStack(None, [None] * n_blocks, [cond_shape] * n_blocks)


def build_stack_from_arch(arch: dict, dtype=np.float32) -> ConditioningStack:
    enc = arch["encoder"]
    encoder = None
    if enc is not None:
        encoder = ConvEncoder(enc["in_ch"], enc["hidden"], enc["out_ch"],
                              n_halvings=enc["n_halvings"], n_flat=enc["n_flat"],
                              slope=enc["slope"], dtype=dtype)
    heads = []
    for i, spec in enumerate(arch["heads"]):
        if spec is None:
            heads.append(None)
        else:
            heads.append(ConvHead(spec["in_ch"], spec["out_ch"],
                                  spec["n_halvings"], slope=spec["slope"],
                                  name=f"head{i}", dtype=dtype))
    return ConditioningStack(encoder, heads, [tuple(s) for s in arch["output_specs"]])
