"""Assembly of full experiment runs from a RunConfig."""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from aal.attention import AttentionState
from aal.checkpoint import TrainingSnapshot, save_checkpoint
from aal.config import ConfigError, RunConfig
from aal.data import (
    channel_stats,
    data_root,
    load_cifar10_dir,
    load_mnist_idx,
    subset_balanced,
    synthetic_digits,
)
from aal.model import SmallCnn
from aal.rng import keyed_rng
from aal.training import train

__all__ = ["load_datasets", "build_model", "run_training"]

_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_mnist_pair(directory, split):
    images_name, labels_name = _MNIST_FILES[split]
    for suffix in ("", ".gz"):
        images = directory / (images_name + suffix)
        labels = directory / (labels_name + suffix)
        if images.exists() and labels.exists():
            return images, labels
    raise ConfigError(f"MNIST {split} files not found under {directory}")


def load_datasets(dcfg):
    """Build (train, test) datasets per the dataset config."""
    if dcfg.name == "synthetic":
        train_ds = synthetic_digits(dcfg.train_size, seed=dcfg.seed * 2 + 1, split="train")
        test_ds = synthetic_digits(dcfg.test_size, seed=dcfg.seed * 2 + 2, split="test")
        return train_ds, test_ds
    root = Path(dcfg.data_dir) if dcfg.data_dir else data_root()
    if dcfg.name == "mnist":
        train_ds = load_mnist_idx(*_find_mnist_pair(root, "train"))
        test_ds = load_mnist_idx(*_find_mnist_pair(root, "test"))
    elif dcfg.name == "cifar10":
        train_ds = load_cifar10_dir(root, "train")
        test_ds = load_cifar10_dir(root, "test")
    else:
        raise ConfigError(f"unknown dataset {dcfg.name!r}")
    train_ds = subset_balanced(train_ds, dcfg.train_size // 10, seed=dcfg.seed)
    test_ds = subset_balanced(test_ds, dcfg.test_size // 10, seed=dcfg.seed)
    train_ds.split, test_ds.split = "train", "test"
    return train_ds, test_ds


def build_model(run_cfg, train_ds):
    mean, std = channel_stats(train_ds)
    return SmallCnn(
        num_classes=train_ds.num_classes,
        input_channels=train_ds.channels,
        image_size=train_ds.image_size,
        widths=tuple(run_cfg.model.widths),
        attention_kernel=run_cfg.model.attention_kernel,
        norm_mean=mean,
        norm_std=std,
        seed=run_cfg.train.seed,
    )


def run_training(run_cfg, echo=True, write_outputs=True, on_epoch=None):
    """Train per the run config; returns (model, rows, snapshot).

    When write_outputs is set, metrics.csv and checkpoint.aal land in
    out_dir alongside the echoed config.
    """
    run_cfg.validate()
    out_dir = Path(run_cfg.out_dir)
    metrics_path = None
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
    if echo and write_outputs:
        run_cfg.echo()

    train_ds, test_ds = load_datasets(run_cfg.dataset)
    model = build_model(run_cfg, train_ds)
    velocities = {k: np.zeros_like(p.data) for k, p in model.parameters().items()}
    state = AttentionState()
    rng = keyed_rng(run_cfg.train.seed, 0x7EA1)

    rows = train(
        model,
        train_ds,
        test_ds,
        run_cfg.train,
        metrics_path=metrics_path,
        velocities=velocities,
        state=state,
        rng=rng,
        on_epoch=on_epoch,
    )
    snapshot = TrainingSnapshot(
        config=run_cfg.train,
        epoch=run_cfg.train.epochs,
        velocities=velocities,
        rng=rng,
        extra={"dataset": dataclasses.asdict(run_cfg.dataset), "model": dataclasses.asdict(run_cfg.model)},
    )
    if write_outputs:
        save_checkpoint(model, snapshot, out_dir / "checkpoint.aal")
    return model, rows, snapshot
