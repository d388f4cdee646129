"""Command-line interface: train, sample, encode, transfer, eval, pca.

Every run echoes its effective configuration next to its outputs so results
are reproducible from the artifacts alone. Exit codes are a stable contract:
0 success, 2 config error, 3 data error, 4 diverged, 5 io error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from condflow import __version__
from condflow.conditioning import one_hot_batch
from condflow.config import RunConfig, data_root, load_run_config
from condflow.datasets import (
    LabeledImageDataset,
    SynthDataset,
    ToyShapesDataset,
    bimodal_density,
    ensure_mnist,
    gaussian_ring_density,
    load_mnist_idx,
)
from condflow.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateDataError,
)
from condflow.evaluation import (
    EvalReport,
    ab_saturation,
    best_of_k_mse,
    bits_per_dim,
    latent_pca,
    model_checksum,
    nll_nats,
    sample_variance,
    style_transfer,
    temperature_sample,
)
from condflow.model import (
    FlowModel,
    build_mnist_model,
    build_toyshapes_model,
    build_vector_model,
)
from condflow.training import TrainState, fit, load_checkpoint, new_train_state
from condflow import report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_IO = 5


# --------------------------------------------------------------------------
# Construction from a run config
# --------------------------------------------------------------------------

def model_from_run(run: RunConfig) -> FlowModel:
    m = run.model
    if run.task == "mnist":
        model = build_mnist_model(n_blocks=m["n_blocks"], hidden=m["hidden"],
                                  seed=m["seed"], alpha=m["alpha"],
                                  clamp=m["clamp"], permute=m["permute"])
    elif run.task == "synth":
        model = build_vector_model(m["dim"], m["n_conditions"],
                                   n_blocks=m["n_blocks"], hidden=m["hidden"],
                                   seed=m["seed"], alpha=m["alpha"],
                                   clamp=m["clamp"], permute=m["permute"])
    else:
        model = build_toyshapes_model(size=m["size"],
                                      blocks_per_stage=tuple(m["blocks_per_stage"]),
                                      hidden_ch=m["hidden_ch"], cond_ch=m["cond_ch"],
                                      encoder_ch=m["encoder_ch"], seed=m["seed"],
                                      alpha=m["alpha"], clamp=m["clamp"],
                                      permute=m["permute"], use_haar=m["use_haar"])
    model.meta["run"] = run.effective()
    return model


def _density_by_name(name: str):
    if name == "ring":
        return gaussian_ring_density()
    if name == "bimodal":
        return bimodal_density()
    raise ConfigError(f"unknown synth density {name!r}")


def dataset_from_run(run: RunConfig, split: str = "train"):
    if run.task == "synth":
        return SynthDataset(_density_by_name(run.data.get("density", "ring")))
    if run.task == "mnist":
        root = os.path.join(data_root(run.paths), "mnist")
        paths = ensure_mnist(root, n_train=run.data.get("n_train", 10000),
                             n_test=run.data.get("n_test", 2000),
                             allow_synthetic=run.data.get("allow_synthetic", True))
        key = "train" if split == "train" else "test"
        batch = load_mnist_idx(paths[f"{key}_images"], paths[f"{key}_labels"])
        if split == "train":
            n = run.data.get("n_train", batch.n)
            batch.images = batch.images[:n]
            batch.labels = batch.labels[:n]
        return LabeledImageDataset(batch)
    seed = run.data.get("pool_seed", 99) + (0 if split == "train" else 1)
    return ToyShapesDataset(n_pool=run.data.get("n_pool", 600),
                            size=run.model["size"], seed=seed)


def _run_from_dict(stored: dict) -> RunConfig:
    from condflow.training import TrainConfig

    return RunConfig(task=stored["task"], model=dict(stored["model"]),
                     train=TrainConfig(**stored["train"]),
                     data=dict(stored["data"]), paths=dict(stored["paths"]))


def _load_state(path: str) -> TrainState:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def _overrides_from_args(args) -> dict:
    over: dict = {"train": {}, "model": {}, "paths": {}}
    for field in ("max_steps", "batch_size", "seed", "lr", "sigma_noise",
                  "freeze_h_steps", "tau"):
        value = getattr(args, field, None)
        if value is not None:
            over["train"][field] = value
    for switch in ("clamp", "noise", "permute", "haar", "init"):
        value = getattr(args, f"no_{switch}", False)
        if value:
            over["train"][switch] = False
    if getattr(args, "data_dir", None):
        over["paths"]["data"] = args.data_dir
    return {k: v for k, v in over.items() if v}


def cmd_train(args) -> int:
    run = load_run_config(args.preset, args.config, _overrides_from_args(args))
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    run.echo(out_dir)
    dataset = dataset_from_run(run, "train")
    model = model_from_run(run)
    state = new_train_state(model, run.train)
    result = fit(dataset, state, out_dir=out_dir)
    if result.log_path and os.path.exists(result.log_path):
        try:
            report.render_loss_curves(result.log_path,
                                      os.path.join(out_dir, "loss.png"),
                                      smooth_window=run.train.plateau_window)
        except ValueError:
            pass
    if result.status == "diverged":
        print(f"diverged after {result.steps_run} steps; "
              f"last checkpoint kept", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {result.steps_run} steps, final loss "
          f"{result.final_loss:.6g}; checkpoint at {result.checkpoint_path}"
          if result.final_loss is not None else "no steps run")
    return EXIT_OK


def _condition_batch(model: FlowModel, run: RunConfig, spec: str | None,
                     split: str = "test"):
    """Resolve a condition spec string into (raw condition batch, labels)."""
    task = run.task
    if task in ("mnist", "synth"):
        n_classes = 10 if task == "mnist" else run.model["n_conditions"]
        if spec in (None, "all"):
            labels = list(range(n_classes))
        else:
            try:
                labels = [int(tok) for tok in spec.split(",") if tok != ""]
            except ValueError:
                raise ConfigError(f"bad condition spec {spec!r}")
        if any(not 0 <= v < n_classes for v in labels):
            raise ConfigError(f"condition labels outside [0, {n_classes})")
        return one_hot_batch(np.array(labels), n_classes), labels
    dataset = dataset_from_run(run, split)
    if spec in (None, "all"):
        indices = list(range(min(6, dataset.L.shape[0])))
    else:
        try:
            indices = [int(tok) for tok in spec.split(",") if tok != ""]
        except ValueError:
            raise ConfigError(f"bad condition spec {spec!r}")
        if any(not 0 <= i < dataset.L.shape[0] for i in indices):
            raise ConfigError("condition index outside the evaluation pool")
    return dataset.L[indices].astype(np.float32), indices


def cmd_sample(args) -> int:
    state = _load_state(args.checkpoint)
    model = state.model
    run = _run_from_dict(model.meta["run"])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sample_args.json"), "w") as f:
        json.dump({"checkpoint": args.checkpoint, "conditions": args.conditions,
                   "n": args.n, "beta": args.beta, "seed": args.seed,
                   "shared_z": args.shared_z, "version": __version__}, f, indent=2)
    if args.n == 0:
        print("n = 0: nothing to sample")
        return EXIT_OK
    c_raw, labels = _condition_batch(model, run, args.conditions)
    rng = np.random.default_rng(args.seed)
    d = model.input_dim
    rows = []
    for _ in range(args.n):
        if args.shared_z:
            z = rng.standard_normal((1, d)).astype(model.dtype)
            z = np.repeat(z, len(labels), axis=0)
            if args.beta is not None:
                norms = np.linalg.norm(z, axis=1, keepdims=True)
                z = z / np.maximum(norms, 1e-12) * (args.beta * np.sqrt(d))
            rows.append(model.decode(z, c_raw))
        elif args.beta is not None:
            rows.append(temperature_sample(model, c_raw, args.beta, rng))
        else:
            rows.append(model.sample(c_raw, rng))
    samples = np.stack(rows)          # (n, n_cond, ...)

    if run.task in ("mnist",):
        path = report.digit_grid(samples, os.path.join(args.out, "samples.png"),
                                 row_labels=[f"z{i}" for i in range(args.n)])
        print(f"wrote {path}")
    elif run.task == "synth":
        flat = samples.reshape(-1, samples.shape[-1])
        cond_col = np.repeat([labels], args.n, axis=0).reshape(-1, 1)
        out = np.concatenate([cond_col, flat], axis=1)
        path = os.path.join(args.out, "samples.csv")
        header = "condition," + ",".join(f"x{i}" for i in range(samples.shape[-1]))
        np.savetxt(path, out, delimiter=",", header=header, comments="")
        print(f"wrote {path}")
    else:
        sheet = samples.transpose(1, 0, 2, 3, 4)   # (n_cond, n, 2, H, W)
        path = report.colorization_sheet(c_raw, sheet,
                                         os.path.join(args.out, "samples.png"))
        print(f"wrote {path}")
    np.save(os.path.join(args.out, "samples.npy"), samples)
    return EXIT_OK


def _eval_arrays(model: FlowModel, run: RunConfig, n: int, seed: int):
    """Held-out (x, c_raw) pairs for encoding-side metrics."""
    rng = np.random.default_rng(seed)
    if run.task == "synth":
        dataset = dataset_from_run(run, "test")
        return dataset.sample_batch(rng, n)
    if run.task == "mnist":
        dataset = dataset_from_run(run, "test")
        return dataset.sample_batch(rng, min(n, dataset.batch.n))
    dataset = dataset_from_run(run, "test")
    ab, L, _ = dataset.eval_items(n)
    return ab, L


def cmd_encode(args) -> int:
    state = _load_state(args.checkpoint)
    model = state.model
    run = _run_from_dict(model.meta["run"])
    x, c_raw = _eval_arrays(model, run, args.n, args.seed)
    z = model.encode_flat(x.astype(model.dtype), c_raw)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "latents.npy"), z)
    np.save(os.path.join(args.out, "conditions.npy"), c_raw)
    print(f"encoded {z.shape[0]} items of dimension {z.shape[1]}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    state = _load_state(args.checkpoint)
    model = state.model
    run = _run_from_dict(model.meta["run"])
    os.makedirs(args.out, exist_ok=True)
    x, c_raw = _eval_arrays(model, run, max(args.index + 1, 8), seed=args.seed)
    x = x[args.index:args.index + 1].astype(model.dtype)
    c = c_raw[args.index:args.index + 1]
    c_hat, labels = _condition_batch(model, run, args.targets)
    outputs = []
    for i in range(c_hat.shape[0]):
        outputs.append(style_transfer(model, x, c, c_hat[i:i + 1])[0])
    out = np.stack(outputs)
    np.save(os.path.join(args.out, "transfer.npy"), out)
    if run.task == "mnist":
        grid = np.concatenate([x, out], axis=0)[None]
        report.digit_grid(grid, os.path.join(args.out, "transfer.png"),
                          row_labels=["restyled"])
    elif run.task == "toyshapes":
        report.colorization_sheet(c_hat, out[:, None],
                                  os.path.join(args.out, "transfer.png"))
    print(f"transferred item {args.index} onto {len(labels)} conditions")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_state(args.checkpoint)
    model = state.model
    run = _run_from_dict(model.meta["run"])
    task = run.task
    if args.metric == "mse" and task != "toyshapes":
        raise ConfigError(f"best-of-k MSE is unsupported for task {task!r}")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    x, c_raw = _eval_arrays(model, run, args.n, args.seed)
    x = x.astype(model.dtype)
    z_flat, logdet = model.encode_with_logdet(x, c_raw)
    dim = model.input_dim
    report_obj = EvalReport(
        task=task, n_samples=x.shape[0], k=args.k, seed=args.seed,
        model_checksum=model_checksum(model),
        nll_per_dim=nll_nats(z_flat, logdet, dim) / dim,
        bits_per_dim=bits_per_dim(z_flat, logdet, dim),
    )
    if task == "toyshapes":
        gens = []
        for i in range(x.shape[0]):
            reps = np.repeat(c_raw[i:i + 1], args.k, axis=0)
            gens.append(model.sample(reps, rng))
        gens = np.stack(gens)                       # (M, k, 2, H, W)
        report_obj.best_of_k_mse = best_of_k_mse(x, gens)
        report_obj.pixel_variance = sample_variance(gens)
        report_obj.notes["ab_units"] = "normalized (Lab ab / 128)"
        report_obj.notes["mean_saturation"] = ab_saturation(
            gens.reshape(-1, *gens.shape[2:]))
        report.colorization_sheet(c_raw[:6], gens[:6],
                                  os.path.join(args.out, "diversity.png"))
    path = os.path.join(args.out, "report.json")
    with open(path, "w") as f:
        f.write(report_obj.to_json())
    print(report_obj.to_json())
    return EXIT_OK


def cmd_pca(args) -> int:
    state = _load_state(args.checkpoint)
    model = state.model
    run = _run_from_dict(model.meta["run"])
    x, c_raw = _eval_arrays(model, run, args.n, args.seed)
    z = model.encode_flat(x.astype(model.dtype), c_raw)
    result = latent_pca(z)
    os.makedirs(args.out, exist_ok=True)
    np.save(os.path.join(args.out, "components.npy"), result.components)
    with open(os.path.join(args.out, "explained_variance.csv"), "w") as f:
        f.write("component,variance,fraction\n")
        total = result.explained_variance.sum()
        for i, v in enumerate(result.explained_variance):
            f.write(f"{i},{v:.8g},{v / total:.8g}\n")
    report.explained_variance_figure(result.explained_variance,
                                     os.path.join(args.out, "explained_variance.png"))
    scales = [-2.0, -1.0, 0.0, 1.0, 2.0]
    n_axes = min(args.axes, result.components.shape[0])
    cond0 = c_raw[:1]
    for axis in range(n_axes):
        walk = result.walk(axis, scales).astype(model.dtype)
        decoded = np.stack([
            model.decode(walk[i:i + 1], cond0)[0] for i in range(walk.shape[0])
        ])
        if run.task == "mnist":
            side = int(round(np.sqrt(model.input_dim)))
            report.pca_axis_sheet(decoded, scales,
                                  os.path.join(args.out, f"axis{axis}.png"), axis,
                                  render=lambda v: v.reshape(side, side) + 0.5)
        elif run.task == "toyshapes":
            from condflow.report import colorization_to_rgb
            rgb = colorization_to_rgb(decoded, np.repeat(cond0, len(scales), axis=0))
            report.pca_axis_sheet(rgb, scales,
                                  os.path.join(args.out, f"axis{axis}.png"), axis)
    print(f"wrote PCA axes and variance spectrum to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing and dispatch
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condflow",
        description="Conditional invertible flows: train, sample, and probe "
                    "the latent space.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a preset/config")
    train.add_argument("--preset", choices=("mnist", "synth", "toyshapes"))
    train.add_argument("--config", help="JSON config file")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--data-dir", help="data root (else $CONDFLOW_DATA)")
    for name, typ in (("max-steps", int), ("batch-size", int), ("seed", int),
                      ("freeze-h-steps", int), ("lr", float),
                      ("sigma-noise", float), ("tau", float)):
        train.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    for switch in ("clamp", "noise", "permute", "haar", "init"):
        train.add_argument(f"--no-{switch}", action="store_true",
                           dest=f"no_{switch}")
    train.set_defaults(func=cmd_train)

    sample = sub.add_parser("sample", help="conditional samples from a checkpoint")
    sample.add_argument("checkpoint")
    sample.add_argument("--out", required=True)
    sample.add_argument("--conditions", default="all",
                        help="comma-separated labels/indices, or 'all'")
    sample.add_argument("--n", type=int, default=6, help="samples per condition")
    sample.add_argument("--beta", type=float, default=None,
                        help="latent norm scale (temperature)")
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--shared-z", action="store_true", dest="shared_z",
                        help="reuse one z across all conditions per row")
    sample.set_defaults(func=cmd_sample)

    encode = sub.add_parser("encode", help="latent codes for held-out data")
    encode.add_argument("checkpoint")
    encode.add_argument("--out", required=True)
    encode.add_argument("--n", type=int, default=512)
    encode.add_argument("--seed", type=int, default=0)
    encode.set_defaults(func=cmd_encode)

    transfer = sub.add_parser("transfer", help="re-decode one item under new "
                                               "conditions")
    transfer.add_argument("checkpoint")
    transfer.add_argument("--out", required=True)
    transfer.add_argument("--index", type=int, default=0)
    transfer.add_argument("--targets", default="all")
    transfer.add_argument("--seed", type=int, default=0)
    transfer.set_defaults(func=cmd_transfer)

    ev = sub.add_parser("eval", help="metrics report for a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--out", required=True)
    ev.add_argument("--n", type=int, default=64)
    ev.add_argument("--k", type=int, default=8)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--metric", choices=("all", "mse"), default="all")
    ev.set_defaults(func=cmd_eval)

    pca = sub.add_parser("pca", help="principal latent axes and decoded walks")
    pca.add_argument("checkpoint")
    pca.add_argument("--out", required=True)
    pca.add_argument("--n", type=int, default=512)
    pca.add_argument("--axes", type=int, default=4)
    pca.add_argument("--seed", type=int, default=0)
    pca.set_defaults(func=cmd_pca)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
