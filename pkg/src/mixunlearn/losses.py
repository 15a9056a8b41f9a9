"""Loss functions for the adversarial mixup unlearning objective.

The three batch losses share one contrastive skeleton: per pair, a
numerator similarity term against the retain-side target and a
log-sum-exp over forget-side similarity terms scaled by a temperature.
The generator loss is the unlearner mix loss with the opposite sign (and
its own temperature), which is what makes the optimization adversarial.

SimLoss is 1 - cosine similarity, so every term is bounded in [0, 2] and
every exponent argument is bounded by 2/tau; the losses are finite for
arbitrary finite inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import one_hot, predict_probs
from .tensor import Tensor

LABEL_MODES = ("aware", "agnostic")


class ConfigError(ValueError):
    pass


@dataclass
class LossConfig:
    tau_gen: float = 0.1
    tau_mix: float = 10.0
    tau_real: float = 5.0
    omega: float = 1.0
    sharpen_t: float = 0.3
    label_mode: str = "agnostic"
    sharpen_enabled: bool = True  # cleared by the no-sharpen ablation

    def validate(self) -> None:
        for name in ("tau_gen", "tau_mix", "tau_real"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.omega < 0:
            raise ConfigError(f"omega must be non-negative, got {self.omega}")
        if not 0 < self.sharpen_t <= 1:
            raise ConfigError(f"sharpen_t must be in (0, 1], got {self.sharpen_t}")
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")


def sharpen(q: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scale a categorical distribution: q_i^(1/T) normalized.

    Accepts a single distribution or a batch (last axis = classes).
    Exact zeros stay zero; T -> 0 approaches one-hot; T = 1 is identity.
    """
    if temperature <= 0:
        raise ValueError(f"sharpen temperature must be positive, got {temperature}")
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < 0):
        raise ValueError("sharpen input has negative entries")
    total = q.sum(axis=-1)
    if np.any(total <= 0):
        raise ValueError("sharpen input sums to zero")
    powered = q ** (1.0 / temperature)
    return powered / powered.sum(axis=-1, keepdims=True)


def target_distribution(f_d, x: np.ndarray, y: np.ndarray | None, cfg: LossConfig) -> np.ndarray:
    """Per-sample target p(x): one-hot labels (aware) or sharpened f_D output."""
    if cfg.label_mode == "aware":
        if y is None:
            raise ConfigError("label-aware mode needs labels, got None")
        return one_hot(np.asarray(y), f_d.num_classes)
    probs = predict_probs(f_d, x)
    if not cfg.sharpen_enabled:
        return probs
    return sharpen(probs, cfg.sharpen_t)


def sim_loss(p, q, axis=-1) -> Tensor:
    """1 - cosine similarity; 0 for aligned vectors, 2 for antiparallel."""
    return T.sub(1.0, T.cosine_similarity(p, q, axis=axis))


def _as_rows(t: Tensor | np.ndarray) -> Tensor:
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.data.ndim == 1:
        t = T.reshape(t, (1, t.data.shape[0]))
    if t.data.ndim != 2:
        raise T.ShapeMismatch(f"expected (batch, classes) rows, got {t.data.shape}")
    return t


def _contrastive_parts(probs_mix, p_i, p_j, lam) -> tuple[Tensor, Tensor, np.ndarray, int]:
    probs_mix = _as_rows(probs_mix)
    n = probs_mix.data.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    sim_num = sim_loss(probs_mix, np.asarray(p_j))
    sim_den = sim_loss(probs_mix, np.asarray(p_i))
    return sim_num, sim_den, lam, n


def loss_mix(probs_mix, p_i, p_j, lam, cfg: LossConfig) -> Tensor:
    """Unlearner loss on mixed samples (retain x_j, forget x_i sides)."""
    sim_num, sim_den, lam, n = _contrastive_parts(probs_mix, p_i, p_j, lam)
    num = T.tsum(T.mul(1.0 - lam, sim_num))
    lse = T.logsumexp(T.mul(lam / cfg.tau_mix, sim_den))
    return T.sub(num, T.mul(float(n), lse))


def loss_gen(probs_mix, p_i, p_j, lam, cfg: LossConfig) -> Tensor:
    """Generator loss: the mix loss reversed, with its own temperature."""
    sim_num, sim_den, lam, n = _contrastive_parts(probs_mix, p_i, p_j, lam)
    num = T.tsum(T.mul(1.0 - lam, sim_num))
    lse = T.logsumexp(T.mul(lam / cfg.tau_gen, sim_den))
    return T.sub(T.mul(float(n), lse), num)


def loss_real(probs_i, probs_j, p_i, p_j, cfg: LossConfig) -> Tensor:
    """Unlearner loss on the real samples: retain x_j targets, repel x_i targets."""
    probs_i, probs_j = _as_rows(probs_i), _as_rows(probs_j)
    n = probs_j.data.shape[0]
    if n == 0 or probs_i.data.shape[0] == 0:
        raise ValueError("empty batch")
    sim_j = sim_loss(probs_j, np.asarray(p_j))
    sim_i = sim_loss(probs_i, np.asarray(p_i))
    lse = T.logsumexp(T.mul(1.0 / cfg.tau_real, sim_i))
    return T.sub(T.tsum(sim_j), T.mul(float(n), lse))


def loss_unlearn(l_mix, l_real, omega: float) -> Tensor:
    if omega < 0:
        raise ConfigError(f"omega must be non-negative, got {omega}")
    l_mix = l_mix if isinstance(l_mix, Tensor) else Tensor(l_mix)
    return T.add(l_mix, T.mul(float(omega), l_real))


def contrastive_value(sim_num: np.ndarray, sim_den: np.ndarray, lam: np.ndarray, tau: float, sign: float = 1.0) -> float:
    """Plain-numpy evaluation of the contrastive sum from precomputed sims."""
    v = lam * sim_den / tau
    m = v.max()
    lse = m + np.log(np.exp(v - m).sum())
    total = ((1.0 - lam) * sim_num).sum() - len(sim_num) * lse
    return float(sign * total)
