"""Unlearning algorithms: the alternating adversarial loop and baselines.

Every algorithm warm-starts the unlearner from the initial model's
parameters (except Retrain, which trains from scratch on the remaining
data only), walks seeded paired forget/remain batches for a fixed number
of epochs, and returns an UnlearnRun with full per-iteration loss traces.
The initial model is never mutated: its outputs and features are cached
up front and all optimizer steps touch only the unlearner or the mixer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import ForgetSplit
from .losses import (
    LossConfig,
    contrastive_value,
    loss_real,
    loss_unlearn,
    sim_loss,
    target_distribution,
)
from .mixgen import (
    LambdaSampler,
    MixBlock,
    SideBatch,
    mixer_arch_for,
    mixblock_forward,
    train_generator_step,
    vanilla_mix,
)
from .models import (
    TrainConfig,
    cross_entropy,
    one_hot,
    predict_features,
    predict_probs,
    sgd_step,
    train_classifier,
    zero_grads,
)
from .tensor import Tensor

TRACE_KEYS = ("l_gen", "l_mix", "l_real", "l_unlearn")


class UnlearnDiverged(RuntimeError):
    """NaN/Inf in the objective; carries the traces collected so far."""

    def __init__(self, message: str, traces: dict[str, list[float]]):
        super().__init__(message)
        self.traces = traces


@dataclass
class UnlearnConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    unlearner_lr: float = 2e-3
    generator_lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    generator_interval: int = 4
    alpha: float = 0.75
    # ablation switches
    no_mixblock: bool = False
    no_l_real: bool = False
    no_l_mix: bool = False
    no_sharpen: bool = False
    # baseline weights (NegGrad / RandLabel / L-Mix)
    retain_weight: float = 1.0
    forget_weight: float = 1.0

    def validate(self) -> None:
        self.loss.validate()
        if self.unlearner_lr < 0 or self.generator_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.generator_interval < 1:
            raise ValueError("epochs, batch_size and generator_interval must be >= 1")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.retain_weight < 0 or self.forget_weight < 0:
            raise ValueError("baseline weights must be non-negative")

    def effective_loss(self) -> LossConfig:
        if self.no_sharpen:
            return replace(self.loss, sharpen_enabled=False)
        return self.loss


@dataclass
class UnlearnRun:
    model: object
    traces: dict[str, list[float]]
    iterations_per_epoch: int
    generator_steps: int
    duration_s: float
    seed: int
    generator: MixBlock | None = None


def _check_split(split: ForgetSplit) -> None:
    if len(split.forget) == 0 or len(split.remain) == 0:
        raise ValueError("both forget and remain parts must be non-empty")


def iterations_per_epoch(n_forget: int, n_remain: int, batch_size: int) -> int:
    return int(np.ceil(max(n_forget, n_remain) / batch_size))


def paired_epoch_indices(
    n_forget: int, n_remain: int, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Index streams for one epoch: both sides shuffled, shorter side cycled.

    Returns (iters, batch_size)-shaped arrays so every batch pair is full.
    """
    iters = iterations_per_epoch(n_forget, n_remain, batch_size)
    total = iters * batch_size
    idx_f = np.resize(rng.permutation(n_forget), total).reshape(iters, batch_size)
    idx_r = np.resize(rng.permutation(n_remain), total).reshape(iters, batch_size)
    return idx_f, idx_r


def _trace_guard(traces: dict[str, list[float]], epoch: int, it: int) -> None:
    latest = {k: v[-1] for k, v in traces.items() if v}
    if any(not np.isfinite(x) for x in latest.values()):
        raise UnlearnDiverged(
            f"non-finite loss at epoch {epoch}, iteration {it}: {latest}", traces
        )


def unlearn_mixunlearn(f_d, split: ForgetSplit, cfg: UnlearnConfig) -> UnlearnRun:
    """Alternating adversarial unlearning with mixed-sample regularization."""
    cfg.validate()
    _check_split(split)
    start = time.monotonic()
    loss_cfg = cfg.effective_loss()
    f_u = f_d.copy()

    # Frozen-initial-model caches: targets for both sides, features for the mixer.
    p_f = target_distribution(f_d, split.forget.inputs, split.forget.labels, loss_cfg)
    p_r = target_distribution(f_d, split.remain.inputs, split.remain.labels, loss_cfg)

    use_mix = not cfg.no_l_mix
    generator = None
    h_f = h_r = None
    if use_mix and not cfg.no_mixblock:
        h_f = predict_features(f_d, split.forget.inputs)
        h_r = predict_features(f_d, split.remain.inputs)
        generator = MixBlock(
            mixer_arch_for(f_d.penultimate_width, split.forget.sample_shape), seed=cfg.seed + 1
        )

    batch_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    lam_sampler = LambdaSampler(cfg.alpha, seed=cfg.seed + 2)

    traces: dict[str, list[float]] = {k: [] for k in TRACE_KEYS}
    nf, nr = len(split.forget), len(split.remain)
    gen_steps = 0
    global_it = 0

    for epoch in range(cfg.epochs):
        idx_f_all, idx_r_all = paired_epoch_indices(nf, nr, cfg.batch_size, batch_rng)
        for it in range(idx_f_all.shape[0]):
            bi, bj = idx_f_all[it], idx_r_all[it]
            x_i, x_j = split.forget.inputs[bi], split.remain.inputs[bj]
            t_i, t_j = p_f[bi], p_r[bj]
            lam = lam_sampler.sample(len(bi))

            if generator is not None and global_it % cfg.generator_interval == 0:
                # trace records L_gen on the post-step mixes below
                train_generator_step(
                    generator,
                    f_u,
                    SideBatch(x_i, h_f[bi], t_i),
                    SideBatch(x_j, h_r[bj], t_j),
                    lam,
                    loss_cfg,
                    cfg.generator_lr,
                )
                gen_steps += 1

            l_mix_t = None
            sims = None
            if use_mix:
                if generator is not None:
                    with T.no_grad():
                        x_mix, _ = mixblock_forward(generator, x_i, x_j, h_f[bi], h_r[bj], lam)
                    x_mix = x_mix.data
                else:
                    x_mix = vanilla_mix(x_i, x_j, lam)
                probs_mix = f_u.forward(x_mix)
                sim_num = sim_loss(probs_mix, t_j)
                sim_den = sim_loss(probs_mix, t_i)
                num = T.tsum(T.mul(1.0 - lam, sim_num))
                lse = T.logsumexp(T.mul(lam / loss_cfg.tau_mix, sim_den))
                l_mix_t = T.sub(num, T.mul(float(len(bi)), lse))
                sims = (sim_num.data.copy(), sim_den.data.copy())

            l_real_t = None
            if not cfg.no_l_real:
                l_real_t = loss_real(f_u.forward(x_i), f_u.forward(x_j), t_i, t_j, loss_cfg)

            if l_mix_t is None and l_real_t is None:
                raise ValueError("both loss terms ablated away; nothing to optimize")
            total = loss_unlearn(
                l_mix_t if l_mix_t is not None else 0.0,
                l_real_t if l_real_t is not None else 0.0,
                loss_cfg.omega if l_real_t is not None else 0.0,
            )
            zero_grads(f_u.params)
            total.backward()
            sgd_step(f_u.params, cfg.unlearner_lr)

            traces["l_mix"].append(l_mix_t.item() if l_mix_t is not None else 0.0)
            traces["l_real"].append(l_real_t.item() if l_real_t is not None else 0.0)
            traces["l_unlearn"].append(total.item())
            # L_gen shares the sims with L_mix; evaluate it without extra forwards.
            if sims is not None:
                traces["l_gen"].append(
                    contrastive_value(sims[0], sims[1], lam, loss_cfg.tau_gen, sign=-1.0)
                )
            else:
                traces["l_gen"].append(0.0)
            _trace_guard(traces, epoch, it)
            global_it += 1

    return UnlearnRun(
        model=f_u,
        traces=traces,
        iterations_per_epoch=iterations_per_epoch(nf, nr, cfg.batch_size),
        generator_steps=gen_steps,
        duration_s=time.monotonic() - start,
        seed=cfg.seed,
        generator=generator,
    )


def unlearn_retrain(split: ForgetSplit, arch: dict, cfg: TrainConfig):
    """Gold standard: a fresh model trained on the remaining data only."""
    if len(split.remain) == 0:
        raise ValueError("remain part must be non-empty")
    return train_classifier(split.remain, arch, cfg)


def _baseline_loop(f_d, split: ForgetSplit, cfg: UnlearnConfig, step_fn) -> UnlearnRun:
    """Shared chassis: warm start, paired batches, traces, NaN guard."""
    cfg.validate()
    _check_split(split)
    start = time.monotonic()
    f_u = f_d.copy()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    traces: dict[str, list[float]] = {k: [] for k in TRACE_KEYS}
    nf, nr = len(split.forget), len(split.remain)
    for epoch in range(cfg.epochs):
        idx_f_all, idx_r_all = paired_epoch_indices(nf, nr, cfg.batch_size, rng)
        for it in range(idx_f_all.shape[0]):
            forget_part, retain_part = step_fn(f_u, idx_f_all[it], idx_r_all[it], epoch)
            total = T.add(forget_part, retain_part)
            zero_grads(f_u.params)
            total.backward()
            sgd_step(f_u.params, cfg.unlearner_lr)
            traces["l_mix"].append(forget_part.item())
            traces["l_real"].append(retain_part.item())
            traces["l_unlearn"].append(total.item())
            traces["l_gen"].append(0.0)
            _trace_guard(traces, epoch, it)
    return UnlearnRun(
        model=f_u,
        traces=traces,
        iterations_per_epoch=iterations_per_epoch(nf, nr, cfg.batch_size),
        generator_steps=0,
        duration_s=time.monotonic() - start,
        seed=cfg.seed,
    )


def unlearn_neggrad(f_d, split: ForgetSplit, cfg: UnlearnConfig) -> UnlearnRun:
    """Gradient ascent on the forget batch, weighted descent on the retain batch."""
    classes = f_d.num_classes
    y_f = one_hot(split.forget.labels, classes)
    y_r = one_hot(split.remain.labels, classes)

    def step(f_u, bi, bj, epoch):
        ascend = T.mul(-cfg.forget_weight, cross_entropy(f_u.logits(split.forget.inputs[bi]), y_f[bi]))
        descend = T.mul(cfg.retain_weight, cross_entropy(f_u.logits(split.remain.inputs[bj]), y_r[bj]))
        return ascend, descend

    return _baseline_loop(f_d, split, cfg, step)


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    d = T.sub(pred, target)
    return T.tmean(T.mul(d, d))


def unlearn_randlabel(f_d, split: ForgetSplit, cfg: UnlearnConfig) -> UnlearnRun:
    """MSE toward per-epoch random one-hots on the forget side, toward cached
    initial-model outputs on the retain side."""
    classes = f_d.num_classes
    cached_r = predict_probs(f_d, split.remain.inputs)
    label_rng = np.random.default_rng(cfg.seed + 7)
    state = {"epoch": -1, "targets": None}

    def step(f_u, bi, bj, epoch):
        if epoch != state["epoch"]:  # resample the random labels once per epoch
            state["epoch"] = epoch
            state["targets"] = one_hot(label_rng.integers(0, classes, size=len(split.forget)), classes)
        forget_part = T.mul(cfg.forget_weight, _mse(f_u.forward(split.forget.inputs[bi]), state["targets"][bi]))
        retain_part = T.mul(cfg.retain_weight, _mse(f_u.forward(split.remain.inputs[bj]), cached_r[bj]))
        return forget_part, retain_part

    return _baseline_loop(f_d, split, cfg, step)


def unlearn_lmix(f_d, split: ForgetSplit, cfg: UnlearnConfig) -> UnlearnRun:
    """RandLabel plus an MSE term on vanilla-mixed samples whose targets blend
    random forget labels with the initial model's retain self-labels."""
    classes = f_d.num_classes
    cached_r = predict_probs(f_d, split.remain.inputs)
    label_rng = np.random.default_rng(cfg.seed + 7)
    lam_sampler = LambdaSampler(cfg.alpha, seed=cfg.seed + 8)
    state = {"epoch": -1, "targets": None}

    def step(f_u, bi, bj, epoch):
        if epoch != state["epoch"]:
            state["epoch"] = epoch
            state["targets"] = one_hot(label_rng.integers(0, classes, size=len(split.forget)), classes)
        rand_i = state["targets"][bi]
        forget_part = T.mul(cfg.forget_weight, _mse(f_u.forward(split.forget.inputs[bi]), rand_i))
        retain_part = T.mul(cfg.retain_weight, _mse(f_u.forward(split.remain.inputs[bj]), cached_r[bj]))
        lam = lam_sampler.sample(len(bi))
        x_mix = vanilla_mix(split.forget.inputs[bi], split.remain.inputs[bj], lam)
        t_mix = lmix_target(rand_i, cached_r[bj], lam)
        mixed_part = _mse(f_u.forward(x_mix), t_mix)
        return forget_part, T.add(retain_part, mixed_part)

    return _baseline_loop(f_d, split, cfg, step)


def lmix_target(rand_forget: np.ndarray, self_retain: np.ndarray, lam) -> np.ndarray:
    """Mixed label: lam * random forget one-hot + (1 - lam) * retain self-label."""
    lam = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    return lam * rand_forget + (1.0 - lam) * self_retain


ALGORITHMS = ("mixunlearn", "retrain", "neggrad", "randlabel", "lmix")


def run_algorithm(name: str, f_d, split: ForgetSplit, cfg: UnlearnConfig) -> UnlearnRun:
    if name == "mixunlearn":
        return unlearn_mixunlearn(f_d, split, cfg)
    if name == "neggrad":
        return unlearn_neggrad(f_d, split, cfg)
    if name == "randlabel":
        return unlearn_randlabel(f_d, split, cfg)
    if name == "lmix":
        return unlearn_lmix(f_d, split, cfg)
    raise ValueError(f"unknown unlearning algorithm {name!r}")
