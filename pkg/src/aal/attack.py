"""Bounded input perturbations and their attention-kernel shaping.

Two sign conventions coexist on purpose. fgsm_delta follows the training
rule delta = epsilon * sign(-grad); fgsm_ascent_delta and pgd climb the
loss, which is the standard adversary used at evaluation time.

Attacks live in raw [0,1] pixel space; dataset normalization happens
inside the model input stage, so the epsilon bound keeps its pixel-unit
meaning.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aal.tensor import Tape, Tensor, softmax_cross_entropy

__all__ = [
    "ATTACK_METHODS",
    "KERNEL_KINDS",
    "AttackConfig",
    "PerturbationState",
    "fgsm_delta",
    "fgsm_ascent_delta",
    "kernel_map",
    "selective_perturbation",
    "apply_attack",
    "pgd",
]

ATTACK_METHODS = ("none", "fgsm", "pgd")
# "one" is the constant kernel: the attack stays global. The other three
# shape it by the attention map (foreground, squared foreground, background).
KERNEL_KINDS = ("one", "identity_M", "squared_M", "one_minus_squared_M")
DIRECTIONS = ("descend", "ascend")


@dataclass
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 8.0 / 255.0
    step_size: float = 2.0 / 255.0
    iterations: int = 10
    kernel: str = "squared_M"
    random_init: bool = True
    direction: str = "descend"  # training-time sign convention

    def validate(self):
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"attack method must be one of {ATTACK_METHODS}, got {self.method!r}")
        if self.kernel not in KERNEL_KINDS:
            raise ValueError(f"attack kernel must be one of {KERNEL_KINDS}, got {self.kernel!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"attack direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.method != "none" and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.method == "pgd" and self.iterations < 1:
            raise ValueError(f"pgd iterations must be >= 1, got {self.iterations}")
        return self


@dataclass
class PerturbationState:
    """Raw perturbation delta and its kernel-shaped counterpart eta."""

    delta: np.ndarray
    eta: np.ndarray


def fgsm_delta(grad_x, epsilon):
    """Training perturbation: epsilon * sign(-grad), with sign(0) = 0."""
    grad_x = np.asarray(grad_x)
    if not np.isfinite(grad_x).all():
        raise ValueError("fgsm_delta: non-finite gradient")
    return epsilon * np.sign(-grad_x)


def fgsm_ascent_delta(grad_x, epsilon):
    """Loss-ascent perturbation (the standard adversary): epsilon * sign(grad)."""
    grad_x = np.asarray(grad_x)
    if not np.isfinite(grad_x).all():
        raise ValueError("fgsm_ascent_delta: non-finite gradient")
    return epsilon * np.sign(grad_x)


def kernel_map(M_assoc, kind):
    """Elementwise attack kernel over an attention map in [0,1]."""
    m = np.asarray(M_assoc)
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("kernel_map: attention map outside [0,1]; upstream clamp violated")
    if kind == "one":
        return np.ones_like(m)
    if kind == "identity_M":
        return m
    if kind == "squared_M":
        return m * m
    if kind == "one_minus_squared_M":
        return 1.0 - m * m
    raise ValueError(f"kernel_map: unknown kernel kind {kind!r}")


def selective_perturbation(k_map, delta):
    """eta = k(M_assoc) (*) delta, the kernel map broadcast across channels."""
    return np.asarray(k_map) * np.asarray(delta)


def apply_attack(x, eta):
    """x' = clip(x + eta, 0, 1); inputs are raw pixels before normalization."""
    return np.clip(np.asarray(x) + np.asarray(eta), 0.0, 1.0)


def pgd(x, labels, model, config, k_map=None, rng=None):
    """Iterated loss-ascent attack projected onto the epsilon ball and [0,1].

    When k_map is given every step is shaped by it; otherwise the attack is
    global. The model must be in inference mode.
    """
    if model.training:
        raise RuntimeError("pgd: model must be in inference mode")
    if config.method != "pgd":
        raise ValueError(f"pgd: config.method must be 'pgd', got {config.method!r}")
    config.validate()
    x = np.asarray(x)
    eps = config.epsilon
    lo, hi = x - eps, x + eps
    if config.random_init:
        if rng is None:
            rng = np.random.Generator(np.random.Philox(key=[0, 0xAD7]))
        xt = np.clip(x + rng.uniform(-eps, eps, size=x.shape).astype(x.dtype), 0.0, 1.0)
    else:
        xt = x.copy()
    with model.frozen_parameters():
        for _ in range(config.iterations):
            xt_t = Tensor(xt, requires_grad=True)
            with Tape() as tape:
                logits, _ = model.forward(xt_t)
                loss = softmax_cross_entropy(logits, labels)
            tape.backward(loss)
            step = config.step_size * np.sign(xt_t.grad)
            if k_map is not None:
                step = np.asarray(k_map) * step
            xt = np.clip(np.clip(xt + step, 0.0, 1.0), lo, hi)
    return xt
