"""Mixed-sample synthesis: vanilla interpolation and the learnable mixer.

The mixer ingests frozen feature representations of a forget/remain pair
plus a mixing-ratio embedding and emits a per-element attention mask M in
[0, 1]; the mixed sample is x_i * M + x_j * (1 - M), always an elementwise
convex combination of the two inputs. Training the mixer against a frozen
unlearner is one SGD step on the reversed contrastive objective.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .losses import LossConfig, loss_gen
from .models import ParamContainer, he_uniform, register_builder, sgd_step, zero_grads, frozen
from .tensor import Tensor


def vanilla_mix(x_i: np.ndarray, x_j: np.ndarray, lam) -> np.ndarray:
    """Plain interpolation lam * x_i + (1 - lam) * x_j.

    lam may be a scalar or a per-sample vector matched to the batch axis.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise T.ShapeMismatch(f"vanilla_mix: shapes {x_i.shape} vs {x_j.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam.reshape((-1,) + (1,) * (x_i.ndim - 1))
    return lam * x_i + (1.0 - lam) * x_j


class LambdaSampler:
    """Beta(alpha, alpha) mixing-ratio stream, strictly inside (0, 1)."""

    def __init__(self, alpha: float, seed: int = 0):
        if alpha <= 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.alpha = float(alpha)
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def sample(self, n: int = 1) -> np.ndarray:
        draws = self._rng.beta(self.alpha, self.alpha, size=n)
        return np.clip(draws, 1e-12, 1.0 - 1e-12)


def dense_mixer_arch(feature_dim: int, target_shape, hidden: int = 64, lambda_dim: int = 16) -> dict:
    return {
        "kind": "mixer_dense",
        "feature_dim": int(feature_dim),
        "target_shape": list(target_shape),
        "hidden": int(hidden),
        "lambda_dim": int(lambda_dim),
    }


def conv_mixer_arch(
    feature_dim: int, target_shape, trunk_channels: int = 5, mid_channels: int = 12, lambda_dim: int = 16
) -> dict:
    c, h, w = target_shape
    if h % 4 or w % 4:
        raise ValueError(f"conv mixer needs spatial dims divisible by 4, got {(h, w)}")
    return {
        "kind": "mixer_conv",
        "feature_dim": int(feature_dim),
        "target_shape": [int(c), int(h), int(w)],
        "trunk_channels": int(trunk_channels),
        "mid_channels": int(mid_channels),
        "lambda_dim": int(lambda_dim),
    }


def mixer_arch_for(feature_dim: int, target_shape) -> dict:
    """Default mixer descriptor: conv head for image shapes, dense otherwise."""
    if len(target_shape) == 3:
        return conv_mixer_arch(feature_dim, target_shape)
    return dense_mixer_arch(feature_dim, target_shape)


class MixBlock(ParamContainer):
    """Learnable mask network conditioned on (h_i, h_j, lambda)."""

    def __init__(self, arch: dict, seed: int = 0):
        super().__init__(arch)
        rng = np.random.default_rng(seed)
        f = int(arch["feature_dim"])
        e = int(arch["lambda_dim"])
        self.target_shape = tuple(int(s) for s in arch["target_shape"])
        self.feature_dim = f
        self.w_emb = self._param(he_uniform(rng, (1, e), 1))
        self.b_emb = self._param(np.zeros(e))
        zin = 2 * f + e
        if arch["kind"] == "mixer_dense":
            hidden = int(arch["hidden"])
            out = int(np.prod(self.target_shape))
            self.w1 = self._param(he_uniform(rng, (zin, hidden), zin))
            self.b1 = self._param(np.zeros(hidden))
            self.w2 = self._param(he_uniform(rng, (hidden, out), hidden))
            self.b2 = self._param(np.zeros(out))
        elif arch["kind"] == "mixer_conv":
            c, h, w = self.target_shape
            c0, c1 = int(arch["trunk_channels"]), int(arch["mid_channels"])
            self._coarse = (c0, h // 4, w // 4)
            trunk_out = c0 * (h // 4) * (w // 4)
            self.wt = self._param(he_uniform(rng, (zin, trunk_out), zin))
            self.bt = self._param(np.zeros(trunk_out))
            self.wc1 = self._param(he_uniform(rng, (c1, c0, 3, 3), c0 * 9))
            self.bc1 = self._param(np.zeros(c1))
            self.wc2 = self._param(he_uniform(rng, (c, c1, 3, 3), c1 * 9))
            self.bc2 = self._param(np.zeros(c))
        else:
            raise ValueError(f"unknown mixer kind {arch['kind']!r}")

    def mask(self, h_i: np.ndarray, h_j: np.ndarray, lam: np.ndarray) -> Tensor:
        h_i = np.asarray(h_i, dtype=np.float64)
        h_j = np.asarray(h_j, dtype=np.float64)
        if h_i.ndim != 2 or h_i.shape[1] != self.feature_dim or h_i.shape != h_j.shape:
            raise T.ShapeMismatch(
                f"mixer configured for feature width {self.feature_dim}, "
                f"got {h_i.shape} and {h_j.shape}"
            )
        n = h_i.shape[0]
        lam_col = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).reshape(n, 1)
        emb = T.relu(T.matmul(Tensor(lam_col), self.w_emb) + self.b_emb)
        z = T.concat([Tensor(h_i), Tensor(h_j), emb], axis=1)
        if self.arch["kind"] == "mixer_dense":
            a = T.relu(T.matmul(z, self.w1) + self.b1)
            m = T.sigmoid(T.matmul(a, self.w2) + self.b2)
            return T.reshape(m, (n,) + self.target_shape)
        a = T.relu(T.matmul(z, self.wt) + self.bt)
        a = T.reshape(a, (n,) + self._coarse)
        a = T.relu(T.conv2d(T.upsample2x(a), self.wc1, self.bc1, padding="same"))
        return T.sigmoid(T.conv2d(T.upsample2x(a), self.wc2, self.bc2, padding="same"))


register_builder("mixer_dense", MixBlock)
register_builder("mixer_conv", MixBlock)


def apply_mask(x_i, x_j, mask: Tensor) -> Tensor:
    """x_i * M + x_j * (1 - M); convex elementwise for any M in [0, 1]."""
    x_i = x_i if isinstance(x_i, Tensor) else Tensor(x_i)
    x_j = x_j if isinstance(x_j, Tensor) else Tensor(x_j)
    if x_i.data.shape != x_j.data.shape or x_i.data.shape != mask.data.shape:
        raise T.ShapeMismatch(
            f"apply_mask: shapes {x_i.data.shape}, {x_j.data.shape}, mask {mask.data.shape}"
        )
    return T.add(T.mul(x_i, mask), T.mul(x_j, T.sub(1.0, mask)))


def mixblock_forward(g: MixBlock, x_i, x_j, h_i, h_j, lam) -> tuple[Tensor, Tensor]:
    """Mixed batch and its mask; differentiable w.r.t. the mixer parameters."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise T.ShapeMismatch(f"mixblock_forward: shapes {x_i.shape} vs {x_j.shape}")
    if x_i.shape[1:] != g.target_shape:
        raise T.ShapeMismatch(
            f"mixer configured for sample shape {g.target_shape}, got {x_i.shape[1:]}"
        )
    mask = g.mask(h_i, h_j, lam)
    return apply_mask(x_i, x_j, mask), mask


class SideBatch(NamedTuple):
    """One side of a forget/remain pairing: inputs, h_D features, p(x) targets."""

    x: np.ndarray
    features: np.ndarray
    targets: np.ndarray


def train_generator_step(
    g: MixBlock,
    f_u,
    batch_f: SideBatch,
    batch_r: SideBatch,
    lam: np.ndarray,
    cfg: LossConfig,
    lr: float,
) -> float:
    """One SGD step on the mixer against a frozen unlearner; returns the pre-step loss."""
    if len(batch_f.x) == 0 or len(batch_r.x) == 0:
        raise ValueError("empty batch")
    if len(batch_f.x) != len(batch_r.x):
        raise ValueError(f"batch sizes differ: {len(batch_f.x)} vs {len(batch_r.x)}")
    with frozen(f_u):
        x_mix, _ = mixblock_forward(g, batch_f.x, batch_r.x, batch_f.features, batch_r.features, lam)
        value = loss_gen(f_u.forward(x_mix), batch_f.targets, batch_r.targets, lam, cfg)
        zero_grads(g.params)
        value.backward()
        sgd_step(g.params, lr)
    return value.item()
