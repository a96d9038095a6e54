"""Desk-scale convolutional classifier with a spatial attention layer.

Layout: stride-1 same-padding conv stem, spatial attention multiplied
into the stem features (so the map keeps the input resolution), two
conv + 2x2-maxpool blocks, global average pooling, and a linear head.
Normalization of raw [0,1] pixels happens inside forward, keeping attack
budgets in pixel units.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from aal.attention import SpatialAttentionParams, spatial_attention
from aal.tensor import (
    ShapeError,
    Tensor,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    mul,
    relu,
    softmax_cross_entropy,
)

__all__ = ["SmallCnn", "small_cnn"]


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class SmallCnn:
    """conv -> attention -> (conv, pool) x2 -> global pool -> linear."""

    def __init__(
        self,
        num_classes,
        input_channels=1,
        image_size=28,
        widths=(6, 12, 24),
        attention_kernel=7,
        norm_mean=None,
        norm_std=None,
        dtype=np.float32,
        seed=0,
    ):
        if image_size % 4 != 0:
            raise ShapeError(f"image size must be divisible by 4 (two pools), got {image_size}")
        if len(widths) != 3:
            raise ShapeError(f"widths must have 3 entries, got {widths}")
        self.num_classes = int(num_classes)
        self.input_channels = int(input_channels)
        self.image_size = int(image_size)
        self.widths = tuple(int(c) for c in widths)
        self.attention_kernel = int(attention_kernel)
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.training = True

        mean = np.zeros(input_channels) if norm_mean is None else np.asarray(norm_mean, dtype=float)
        std = np.ones(input_channels) if norm_std is None else np.asarray(norm_std, dtype=float)
        if mean.shape != (input_channels,) or std.shape != (input_channels,):
            raise ShapeError("normalization stats must be per-channel vectors")
        if (std <= 0).any():
            raise ValueError("normalization std must be positive")
        self.norm_mean = mean.astype(self.dtype)
        self.norm_std = std.astype(self.dtype)

        rng = np.random.Generator(np.random.Philox(key=[self.seed, 0x5EED]))
        c1, c2, c3 = self.widths
        cin = input_channels
        self._params = {
            "conv1.weight": Tensor(_he_uniform(rng, (c1, cin, 3, 3), cin * 9, self.dtype), requires_grad=True),
            "conv1.bias": Tensor(np.zeros(c1, dtype=self.dtype), requires_grad=True),
        }
        self.attention = SpatialAttentionParams.init(rng, kernel_size=attention_kernel, dtype=self.dtype)
        self._params["attention.weight"] = self.attention.weight
        self._params["attention.bias"] = self.attention.bias
        self._params.update(
            {
                "block1.weight": Tensor(_he_uniform(rng, (c2, c1, 3, 3), c1 * 9, self.dtype), requires_grad=True),
                "block1.bias": Tensor(np.zeros(c2, dtype=self.dtype), requires_grad=True),
                "block2.weight": Tensor(_he_uniform(rng, (c3, c2, 3, 3), c2 * 9, self.dtype), requires_grad=True),
                "block2.bias": Tensor(np.zeros(c3, dtype=self.dtype), requires_grad=True),
                # small head init keeps early logits near zero; otherwise the
                # cross-entropy shrinks logit variance through the attention
                # gate and the whole stack collapses to uniform predictions
                "head.weight": Tensor(0.1 * _he_uniform(rng, (num_classes, c3), c3, self.dtype), requires_grad=True),
                "head.bias": Tensor(np.zeros(num_classes, dtype=self.dtype), requires_grad=True),
            }
        )
        self._norm_scale = Tensor((1.0 / self.norm_std).reshape(1, -1, 1, 1))
        self._norm_shift = Tensor((-self.norm_mean / self.norm_std).reshape(1, -1, 1, 1))

    def parameters(self):
        return self._params

    def param_count(self):
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    @contextmanager
    def frozen_parameters(self):
        """Temporarily stop tracking parameter gradients (input-only passes)."""
        saved = [(p, p.requires_grad) for p in self._params.values()]
        for p in self._params.values():
            p.requires_grad = False
        try:
            yield
        finally:
            for p, flag in saved:
                p.requires_grad = flag

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def forward(self, x, attention_override=None):
        """Returns (logits, M). x holds raw [0,1] pixels, NCHW.

        attention_override, when given, replaces the computed map in the
        feature multiply (the map M returned is still the computed one).
        """
        if x.ndim != 4 or x.shape[1] != self.input_channels:
            raise ShapeError(f"forward: expected [N,{self.input_channels},H,W], got {x.shape}")
        if x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ShapeError(
                f"forward: expected {self.image_size}x{self.image_size} input, got {x.shape[2]}x{x.shape[3]}"
            )
        p = self._params
        xn = mul(x, self._norm_scale) + self._norm_shift
        f = relu(conv2d(xn, p["conv1.weight"], p["conv1.bias"], stride=1, padding=1))
        m = spatial_attention(f, self.attention)
        gate = m if attention_override is None else Tensor(np.asarray(attention_override, dtype=self.dtype))
        f = mul(f, gate)
        f = max_pool2d(relu(conv2d(f, p["block1.weight"], p["block1.bias"], stride=1, padding=1)))
        f = max_pool2d(relu(conv2d(f, p["block2.weight"], p["block2.bias"], stride=1, padding=1)))
        logits = linear(global_avg_pool(f), p["head.weight"], p["head.bias"])
        return logits, m

    def loss(self, x, labels, attention_override=None):
        logits, m = self.forward(x, attention_override)
        return softmax_cross_entropy(logits, labels), logits, m

    def predict(self, images, batch_size=512):
        """Argmax class per image, computed without taping."""
        images = np.asarray(images)
        out = np.empty(images.shape[0], dtype=np.int64)
        for start in range(0, images.shape[0], batch_size):
            logits, _ = self.forward(Tensor(images[start : start + batch_size].astype(self.dtype)))
            out[start : start + batch_size] = logits.data.argmax(axis=1)
        return out

    def config_dict(self):
        """Constructor arguments needed to rebuild this architecture."""
        return {
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "image_size": self.image_size,
            "widths": list(self.widths),
            "attention_kernel": self.attention_kernel,
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg, dtype=np.float32):
        return cls(dtype=dtype, **cfg)


def small_cnn(num_classes, input_channels, image_size, **kwargs):
    """Factory mirroring the experiment protocol (image_size 28 or 32)."""
    if image_size not in (28, 32):
        raise ShapeError(f"small_cnn: image size must be 28 or 32, got {image_size}")
    return SmallCnn(num_classes, input_channels, image_size, **kwargs)
