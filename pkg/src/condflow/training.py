"""Maximum-likelihood training: loss assembly, noise augmentation, the
identity-start initialization scheme, the fit loop with plateau learning-rate
decay, and bit-exact checkpointing."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from condflow.errors import (
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    NumericError,
)
from condflow.flow_core import LatentCode
from condflow.model import FlowModel, model_from_header
from condflow.numerics.optim import Adam
from condflow.numerics.tensor import Tensor

CHECKPOINT_MAGIC = b"CINN"
CHECKPOINT_VERSION = 1

LN_2PI = float(np.log(2.0 * np.pi))


@dataclass
class TrainConfig:
    sigma_noise: float = 0.02
    tau: float = 1e-5
    lr: float = 1e-3
    lr_decay: float = 0.3
    plateau_patience: int = 5
    plateau_window: int = 200
    batch_size: int = 128
    max_steps: int = 1000
    clamp_alpha: float = 1.9
    seed: int = 0
    freeze_h_steps: int = 0
    precision: str = "float32"
    checkpoint_every: int = 500
    # ablation switches (all on for the full method)
    noise: bool = True
    clamp: bool = True
    permute: bool = True
    haar: bool = True
    init: bool = True

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ConfigError("sigma_noise must be >= 0")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")


def nll_loss(z: LatentCode, total_logdet: Tensor, dim: int) -> Tensor:
    """Batch-mean of per-sample ||z||^2 / 2 - logdet.

    The Gaussian normalization constant is intentionally omitted here (it
    does not depend on parameters); reporting helpers add it back.
    """
    if z.total_dim != dim:
        raise ConfigError(f"latent dimension {z.total_dim} != declared {dim}")
    per_sample = z.norm_sq() * 0.5 - total_logdet
    return per_sample.mean()


def total_loss(nll: Tensor, params, tau: float) -> Tensor:
    """nll plus tau * sum of squared trainable parameters."""
    if tau < 0:
        raise ConfigError("tau must be >= 0")
    if tau == 0:
        return nll
    penalty = None
    for p in params:
        contrib = p.square().sum()
        penalty = contrib if penalty is None else penalty + contrib
    return nll if penalty is None else nll + penalty * tau


def full_nll_nats(nll_value: float, dim: int) -> float:
    """Add the (D/2) ln 2 pi constant so values compare across models."""
    return float(nll_value) + 0.5 * dim * LN_2PI


def add_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Fresh Gaussian augmentation noise; sigma = 0 returns x unchanged."""
    if sigma < 0:
        raise ConfigError("noise sigma must be >= 0")
    if sigma == 0:
        return x
    return x + sigma * rng.standard_normal(x.shape).astype(x.dtype)


def initialize(model: FlowModel, seed: int, zero_last: bool = True) -> list:
    """Xavier-uniform everywhere; final layers of coupling subnets zeroed so
    every block starts as the identity transform. Returns the parameters."""
    rng = np.random.default_rng(seed)
    for block in model.graph.coupling_blocks:
        block.subnet1.init_xavier(rng, zero_last=zero_last)
        block.subnet2.init_xavier(rng, zero_last=zero_last)
    if model.stack.encoder is not None:
        model.stack.encoder.init_xavier(rng)
    for head in model.stack.heads:
        if head is not None:
            head.init_xavier(rng)
            head.norm.gamma.data = np.ones_like(head.norm.gamma.data)
            head.norm.beta.data = np.zeros_like(head.norm.beta.data)
            head.norm.running_mean = np.zeros_like(head.norm.running_mean)
            head.norm.running_var = np.ones_like(head.norm.running_var)
    return model.parameters()


# --------------------------------------------------------------------------
# Train state and checkpoint format
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    model: FlowModel
    optimizer: Adam
    rng: np.random.Generator
    config: TrainConfig
    step: int = 0
    best_loss: float = float("inf")
    plateau_bad: int = 0
    loss_window: list = field(default_factory=list)


@dataclass
class FitResult:
    status: str                  # "ok" or "diverged"
    state: TrainState
    steps_run: int
    initial_loss: float | None
    final_loss: float | None
    log_path: str | None = None
    checkpoint_path: str | None = None


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(state: TrainState, path: str):
    """Atomic write: magic, version, length-prefixed JSON header, then named
    little-endian float32 tensors with shape prefixes."""
    model = state.model
    tensors: dict[str, np.ndarray] = dict(model.state_tensors())
    adam_t = {}
    for p, s in zip(state.optimizer.params, state.optimizer.states):
        tensors[f"adam_m.{p.name}"] = s.m
        tensors[f"adam_v.{p.name}"] = s.v
        adam_t[p.name] = s.t
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.header(),
        "config": asdict(state.config),
        "step": state.step,
        "best_loss": state.best_loss,
        "plateau_bad": state.plateau_bad,
        "loss_window": list(state.loss_window),
        "rng_state": state.rng.bit_generator.state,
        "adam": {"lr": state.optimizer.lr, "t": adam_t},
        "tensor_names": list(tensors.keys()),
    }
    blob = _canonical_json(header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def _read_struct(f, fmt: str, what: str):
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise CorruptCheckpointError(f"truncated checkpoint while reading {what}")
    return struct.unpack(fmt, buf)


def load_checkpoint(path: str) -> TrainState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError(
                f"corrupt header: bad magic {magic!r} in {path}")
        (version,) = _read_struct(f, "<I", "format version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        (header_len,) = _read_struct(f, "<I", "header length")
        blob = f.read(header_len)
        if len(blob) != header_len:
            raise CorruptCheckpointError("truncated checkpoint header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"corrupt header: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        while True:
            raw = f.read(2)
            if not raw:
                break
            if len(raw) != 2:
                raise CorruptCheckpointError("truncated tensor record")
            (name_len,) = struct.unpack("<H", raw)
            name = f.read(name_len).decode("utf-8")
            (ndim,) = _read_struct(f, "<B", f"tensor {name} ndim")
            shape = tuple(_read_struct(f, "<I", f"tensor {name} dims")[0]
                          for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise CorruptCheckpointError(f"truncated data for tensor {name}")
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    expected = set(header.get("tensor_names", []))
    if expected and expected != set(tensors):
        raise CheckpointShapeError("tensor inventory does not match header")

    model = model_from_header(header["model"])
    model.load_state_tensors(tensors)
    config = TrainConfig(**header["config"])
    optimizer = Adam(model.parameters(), lr=header["adam"]["lr"])
    for p, s in zip(optimizer.params, optimizer.states):
        m_key, v_key = f"adam_m.{p.name}", f"adam_v.{p.name}"
        if m_key not in tensors or v_key not in tensors:
            raise CheckpointShapeError(f"missing optimizer state for {p.name!r}")
        if tensors[m_key].shape != p.shape:
            raise CheckpointShapeError(f"optimizer state shape mismatch for {p.name!r}")
        s.m = tensors[m_key].astype(p.data.dtype)
        s.v = tensors[v_key].astype(p.data.dtype)
        s.t = int(header["adam"]["t"][p.name])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    return TrainState(model=model, optimizer=optimizer, rng=rng, config=config,
                      step=int(header["step"]), best_loss=float(header["best_loss"]),
                      plateau_bad=int(header.get("plateau_bad", 0)),
                      loss_window=list(header.get("loss_window", [])))


# --------------------------------------------------------------------------
# Fit loop
# --------------------------------------------------------------------------

def new_train_state(model: FlowModel, config: TrainConfig) -> TrainState:
    initialize(model, config.seed, zero_last=config.init)
    optimizer = Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed + 1)
    return TrainState(model=model, optimizer=optimizer, rng=rng, config=config)


def fit(dataset, state: TrainState, out_dir: str | None = None,
        stop_when=None) -> FitResult:
    """Run the training loop until max_steps, divergence, or ``stop_when``.

    Per step: sample batch, add noise, compute conditioning features, run
    the graph, assemble the loss, backprop, Adam update. The learning rate
    decays when the window-smoothed loss stops improving. A non-finite value
    anywhere aborts with status "diverged"; the last on-disk checkpoint is
    left in place.
    """
    model, config = state.model, state.config
    dim = model.input_dim
    frozen_ids = {id(p) for p in model.stack.encoder_parameters()}
    trainable = model.parameters()

    log_path = ckpt_path = None
    log_file = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss.csv")
        ckpt_path = os.path.join(out_dir, "checkpoint.cinn")
        log_file = open(log_path, "a" if state.step else "w", newline="")
        if state.step == 0:
            log_file.write("step,lr,loss,nll_per_dim\n")

    model.stack.set_training(True)
    status = "ok"
    initial_loss = final_loss = None
    steps_run = 0
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore",
                         under="ignore"):
            while state.step < config.max_steps:
                step = state.step + 1
                x, c_raw = dataset.sample_batch(state.rng, config.batch_size)
                sigma = config.sigma_noise if config.noise else 0.0
                x = add_noise(x, sigma, state.rng)

                frozen = (model.stack.mode == "frozen"
                          or step <= config.freeze_h_steps)
                feats = model.stack.features(c_raw)
                z, logdet = model.graph.forward(x, feats)
                nll = nll_loss(z, logdet, dim)
                loss = total_loss(nll, trainable, config.tau)

                state.optimizer.zero_grad()
                loss.backward()
                state.optimizer.step(skip=frozen_ids if frozen else None)
                model.stack.invalidate_cache()

                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericError("non-finite loss")
                state.step = step
                steps_run += 1
                if initial_loss is None:
                    initial_loss = loss_value
                final_loss = loss_value

                if log_file is not None:
                    per_dim = full_nll_nats(nll.item(), dim) / dim
                    log_file.write(
                        f"{step},{state.optimizer.lr:.8g},{loss_value:.8g},"
                        f"{per_dim:.8g}\n")

                state.loss_window.append(loss_value)
                if len(state.loss_window) > config.plateau_window:
                    state.loss_window.pop(0)
                if step % config.plateau_window == 0 and state.loss_window:
                    smoothed = float(np.mean(state.loss_window))
                    if smoothed < state.best_loss - 1e-12:
                        state.best_loss = smoothed
                        state.plateau_bad = 0
                    else:
                        state.plateau_bad += 1
                        if state.plateau_bad >= config.plateau_patience:
                            state.optimizer.set_lr(
                                state.optimizer.lr * config.lr_decay)
                            state.plateau_bad = 0
                            state.best_loss = smoothed

                if ckpt_path is not None and step % config.checkpoint_every == 0:
                    if log_file is not None:
                        log_file.flush()
                    save_checkpoint(state, ckpt_path)
                if stop_when is not None and stop_when(state, loss_value):
                    break
    except NumericError:
        status = "diverged"
    finally:
        if log_file is not None:
            log_file.close()

    if status == "ok" and ckpt_path is not None:
        save_checkpoint(state, ckpt_path)
    return FitResult(status=status, state=state, steps_run=steps_run,
                     initial_loss=initial_loss, final_loss=final_loss,
                     log_path=log_path, checkpoint_path=ckpt_path)
