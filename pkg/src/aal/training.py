"""Two-inference training loop, optimizer, schedule, and evaluation.

Each step runs a clean forward/backward to harvest the attention map M,
its gradient, and the input gradient; builds the backtracked map M_assoc
and the kernel-shaped perturbation; then runs a second forward/backward
on the attacked batch and updates the weights from that loss alone
(unless mixed_clean_loss adds the clean-pass gradients).
"""
from __future__ import annotations

import math
import time
from contextlib import nullcontext as _nullcontext
from dataclasses import dataclass, field, asdict

import numpy as np

from aal.attack import (
    AttackConfig,
    PerturbationState,
    apply_attack,
    fgsm_ascent_delta,
    fgsm_delta,
    kernel_map,
    pgd,
    selective_perturbation,
)
from aal.attention import AttentionState, backtrack, coupling_gain, descend_attention
from aal.rng import keyed_rng
from aal.tensor import Tape, Tensor, softmax_cross_entropy

__all__ = [
    "TrainConfig",
    "MetricsRow",
    "DivergenceError",
    "aal_step",
    "sgd_update",
    "cosine_lr",
    "evaluate",
    "train",
    "METRICS_HEADER",
]

METRICS_HEADER = "epoch,lr,train_loss,clean_acc,fgsm_acc,pgd_acc,seconds"


class DivergenceError(RuntimeError):
    """Non-finite loss; carries the step's attention and perturbation maps."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    epochs: int = 20
    xi1: float = 0.1
    xi2: float = 0.1
    zeta: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr0: float = 0.1
    schedule: str = "cosine"
    batch_size: int = 64
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    inject_associative_attention: bool = False
    mixed_clean_loss: bool = False

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("xi1", "xi2", "momentum", "weight_decay", "lr0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError(f"zeta must lie in [0,1], got {self.zeta}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be cosine or constant, got {self.schedule!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        self.attack.validate()
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "attack" in d and isinstance(d["attack"], dict):
            d["attack"] = AttackConfig(**d["attack"])
        return cls(**d)


@dataclass
class MetricsRow:
    epoch: int
    lr: float
    train_loss: float
    clean_acc: float
    fgsm_acc: float
    pgd_acc: float
    seconds: float

    def csv_line(self):
        return (
            f"{self.epoch},{self.lr:.8g},{self.train_loss:.8g},"
            f"{self.clean_acc:.6f},{self.fgsm_acc:.6f},{self.pgd_acc:.6f},{self.seconds:.3f}"
        )


def cosine_lr(t, total, lr0):
    """Half-cosine decay from lr0 at t=0 to 0 at t=total, no restarts."""
    if not 0 <= t <= total:
        raise ValueError(f"cosine_lr: step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def sgd_update(param, grad, velocity, lr, momentum, weight_decay):
    """One momentum-SGD step; returns (new_param, new_velocity).

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
    """
    g = grad + weight_decay * param
    v = momentum * velocity + g
    return param - lr * v, v


def _training_delta(images, labels, grad_x, model, config, rng):
    """Raw perturbation per the configured method, in [-eps, eps]."""
    atk = config.attack
    if atk.method == "none":
        return np.zeros_like(images)
    if atk.method == "fgsm":
        if atk.direction == "ascend":
            return fgsm_ascent_delta(grad_x, atk.epsilon).astype(images.dtype)
        return fgsm_delta(grad_x, atk.epsilon).astype(images.dtype)
    if atk.method == "pgd":
        was_training = model.training
        model.eval()
        try:
            x_adv = pgd(images, labels, model, atk, k_map=None, rng=rng)
        finally:
            model.training = was_training
        return (x_adv - images).astype(images.dtype)
    raise ValueError(f"unknown attack method {atk.method!r}")


def coupled_attack(images, labels, model, state, config, rng=None):
    """Clean pass, attention backtracking, and the kernel-shaped attack.

    Updates state (maps and batch-mean history) and returns
    (x_adv, clean_grads, perturbation). Weights are not touched; parameter
    gradients are collected only when the clean loss joins the update.
    """
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels)

    # First inference on clean data: harvest M, dG/dM and the input gradient.
    x1 = Tensor(images, requires_grad=True)
    with _nullcontext() if config.mixed_clean_loss else model.frozen_parameters():
        with Tape() as tape:
            logits, m_t = model.forward(x1)
            loss_clean = softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss_clean.data):
            raise DivergenceError("non-finite loss on clean pass", {"M": state.M})
        tape.backward(loss_clean)
    grad_x = x1.grad
    dg_dm = m_t.grad if m_t.grad is not None else np.zeros_like(m_t.data)
    m = m_t.data

    clean_grads = None
    if config.mixed_clean_loss:
        clean_grads = {k: (p.grad.copy() if p.grad is not None else None) for k, p in model.parameters().items()}
    model.zero_grad()

    # Attack construction and attention backtracking.
    delta = _training_delta(images, labels, grad_x, model, config, rng)
    delta_map = delta.mean(axis=1, keepdims=True)  # channel-avg, HxH per sample
    grad_delta = grad_x.mean(axis=1, keepdims=True)
    m_hat = descend_attention(m, dg_dm, config.xi1)
    g_hat, gamma = coupling_gain(grad_delta, m, delta_map, state.prev_delta, state.prev_M)
    m_assoc = backtrack(m_hat, m, gamma, grad_delta, config.xi2, config.zeta)

    k = kernel_map(m_assoc, config.attack.kernel)
    eta = selective_perturbation(k, delta)
    x_adv = apply_attack(images, eta)

    # Batch-mean history feeds the next step's finite-difference quotient.
    state.M = m
    state.M_hat = m_hat
    state.M_assoc = m_assoc
    state.G_hat = g_hat
    state.gamma = gamma
    state.grad_delta = grad_delta
    state.prev_M = m.mean(axis=0, keepdims=True)
    state.prev_delta = delta_map.mean(axis=0, keepdims=True)
    return x_adv, clean_grads, PerturbationState(delta=delta, eta=eta)


def aal_step(images, labels, model, state, velocities, config, lr, rng=None):
    """One coupled training step; mutates model, state and velocities.

    images are raw [0,1] pixels. Returns the adversarial-pass loss.
    """
    labels = np.asarray(labels)
    x_adv, clean_grads, perturbation = coupled_attack(images, labels, model, state, config, rng)

    # Second inference on the attacked batch; weights update from this loss.
    x2 = Tensor(x_adv.astype(model.dtype))
    with Tape() as tape:
        override = state.M_assoc if config.inject_associative_attention else None
        logits2, _ = model.forward(x2, attention_override=override)
        loss_adv = softmax_cross_entropy(logits2, labels)
    if not np.isfinite(loss_adv.data):
        raise DivergenceError(
            "non-finite loss on adversarial pass",
            {"M": state.M, "M_assoc": state.M_assoc, "delta": perturbation.delta},
        )
    tape.backward(loss_adv)

    for name, p in model.parameters().items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if clean_grads is not None and clean_grads[name] is not None:
            g = g + clean_grads[name]
        p.data, velocities[name] = sgd_update(
            p.data, g, velocities[name], lr, config.momentum, config.weight_decay
        )
    model.zero_grad()
    return float(loss_adv.data)


def attention_snapshot(model, images, labels, config, rng=None):
    """Attention maps for a batch without updating weights.

    Runs the coupled pass twice on the same batch so the second pass sees
    a populated (delta, M) history and a nonzero backtracking step.
    """
    state = AttentionState()
    for _ in range(2):
        coupled_attack(images, labels, model, state, config, rng)
    return state


def _attacked_images(model, images, labels, attack, rng):
    if attack.method == "none":
        return images
    if attack.method == "fgsm":
        x = Tensor(images.astype(model.dtype), requires_grad=True)
        with model.frozen_parameters():
            with Tape() as tape:
                logits, _ = model.forward(x)
                loss = softmax_cross_entropy(logits, labels)
            tape.backward(loss)
        return apply_attack(images, fgsm_ascent_delta(x.grad, attack.epsilon))
    if attack.method == "pgd":
        return pgd(images, labels, model, attack, k_map=None, rng=rng)
    raise ValueError(f"unknown attack method {attack.method!r}")


def evaluate(model, dataset, attack, batch_size=512, rng=None):
    """Top-1 accuracy under a global (unshaped) loss-ascent attack."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    attack.validate()
    was_training = model.training
    model.eval()
    try:
        correct = 0
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            x_adv = _attacked_images(model, images, labels, attack, rng)
            preds = model.predict(x_adv)
            correct += int((preds == labels).sum())
    finally:
        model.training = was_training
    return correct / len(dataset)


def _epoch_metrics(model, test_ds, config, epoch, lr, train_loss, t0):
    atk = config.attack
    clean = evaluate(model, test_ds, AttackConfig(method="none", epsilon=0.0))
    fgsm = evaluate(
        model,
        test_ds,
        AttackConfig(method="fgsm", epsilon=atk.epsilon, step_size=atk.step_size, kernel="one"),
    )
    pgd_acc = evaluate(
        model,
        test_ds,
        AttackConfig(
            method="pgd",
            epsilon=atk.epsilon,
            step_size=atk.step_size,
            iterations=atk.iterations,
            kernel="one",
            random_init=True,
        ),
        rng=keyed_rng(config.seed, epoch, 0xE7A1),
    )
    return MetricsRow(epoch, lr, train_loss, clean, fgsm, pgd_acc, time.perf_counter() - t0)


def train(
    model,
    train_ds,
    test_ds,
    config,
    metrics_path=None,
    start_epoch=0,
    velocities=None,
    state=None,
    rng=None,
    on_epoch=None,
):
    """Run the full training protocol; returns the list of MetricsRow.

    start_epoch / velocities / state / rng allow resuming from a checkpoint;
    a resumed run reproduces the uninterrupted one step for step.
    """
    config.validate()
    n = len(train_ds)
    if n == 0:
        raise ValueError("train: empty training set")
    if velocities is None:
        velocities = {k: np.zeros_like(p.data) for k, p in model.parameters().items()}
    if state is None:
        state = AttentionState()
    if rng is None:
        rng = keyed_rng(config.seed, 0x7EA1)

    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    rows = []
    out = None
    if metrics_path is not None:
        mode = "a" if start_epoch > 0 else "w"
        out = open(metrics_path, mode, newline="\n")
        if start_epoch == 0:
            out.write(METRICS_HEADER + "\n")
    try:
        model.train()
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            perm = keyed_rng(config.seed, epoch).permutation(n)
            loss_sum = 0.0
            lr = config.lr0
            for step in range(steps_per_epoch):
                t = epoch * steps_per_epoch + step
                if config.schedule == "cosine":
                    lr = cosine_lr(t, total_steps, config.lr0)
                idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
                loss_sum += aal_step(
                    train_ds.images[idx], train_ds.labels[idx], model, state, velocities, config, lr, rng
                )
            row = _epoch_metrics(model, test_ds, config, epoch, lr, loss_sum / steps_per_epoch, t0)
            rows.append(row)
            if out is not None:
                out.write(row.csv_line() + "\n")
                out.flush()
            if on_epoch is not None:
                on_epoch(epoch, row, model, state, velocities, rng)
    finally:
        if out is not None:
            out.close()
    return rows
