"""Evaluation: accuracy slices, membership inference, loss-density curves.

All functions here are pure readers: they never mutate the model (the
tests hash parameters around every call). The membership attack is a
loss-threshold attack with held-out calibration: threshold and direction
are chosen on one half of each side to maximize balanced accuracy, then
scored on the other half. 50 means no leakage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset, ForgetSplit
from .models import predict_features, predict_probs


@dataclass
class MetricReport:
    """One evaluation row; fields not applicable to a setup stay None."""

    test_r: float | None = None
    test_f: float | None = None
    train_r: float | None = None
    train_f: float | None = None
    test: float | None = None
    asr: float | None = None

    FIELDS = ("test_r", "test_f", "train_r", "train_f", "test", "asr")

    def as_dict(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in self.FIELDS}


def aggregate_reports(reports: list[MetricReport]) -> dict[str, dict[str, float]]:
    """Mean and (for >= 2 repeats) sample std per populated metric."""
    out: dict[str, dict[str, float]] = {"mean": {}, "std": {}}
    for key in MetricReport.FIELDS:
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        if not values:
            continue
        out["mean"][key] = float(np.mean(values))
        if len(values) >= 2:
            out["std"][key] = float(np.std(values, ddof=1))
    return out


def accuracy(model, dataset: Dataset) -> float:
    """Percentage of argmax-correct predictions."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    probs = predict_probs(model, dataset.inputs)
    return float((probs.argmax(axis=1) == dataset.labels).mean() * 100.0)


def class_level_metrics(model, test_set: Dataset, forgotten_class: int) -> tuple[float, float]:
    """(test_r, test_f): accuracy on the remaining-classes slice and the forgotten slice."""
    forget_idx = test_set.class_indices(forgotten_class)
    if len(forget_idx) == 0:
        raise ValueError(f"class {forgotten_class} absent from the test set")
    remain_idx = np.flatnonzero(test_set.labels != forgotten_class)
    return accuracy(model, test_set.subset(remain_idx)), accuracy(model, test_set.subset(forget_idx))


def data_level_metrics(model, split: ForgetSplit, test_set: Dataset) -> tuple[float, float, float]:
    """(train_r, train_f, test) accuracies."""
    if len(split.forget) == 0 or len(split.remain) == 0 or len(test_set) == 0:
        raise ValueError("all evaluation slices must be non-empty")
    return accuracy(model, split.remain), accuracy(model, split.forget), accuracy(model, test_set)


def per_sample_ce(model, dataset: Dataset) -> np.ndarray:
    """Cross-entropy of each sample's true label under the model."""
    probs = predict_probs(model, dataset.inputs)
    picked = probs[np.arange(len(dataset)), dataset.labels]
    return -np.log(np.maximum(picked, 1e-300))


@dataclass
class MiaConfig:
    seed: int = 0
    min_calibration: int = 20  # per side


def _balanced_accuracy_curve(
    member: np.ndarray, nonmember: np.ndarray, thresholds: np.ndarray
) -> np.ndarray:
    """Balanced accuracy of 'member iff loss <= t' for each candidate t."""
    ms = np.sort(member)
    ns = np.sort(nonmember)
    tpr = np.searchsorted(ms, thresholds, side="right") / len(ms)
    fpr = np.searchsorted(ns, thresholds, side="right") / len(ns)
    return 0.5 * (tpr + (1.0 - fpr))


def membership_inference_asr(
    model, member_set: Dataset, nonmember_set: Dataset, cfg: MiaConfig | None = None
) -> float:
    """Balanced attack accuracy (percent) of the calibrated loss-threshold attack."""
    cfg = cfg or MiaConfig()
    if len(member_set) == 0 or len(nonmember_set) == 0:
        raise ValueError("member and nonmember sets must be non-empty")
    loss_m = per_sample_ce(model, member_set)
    loss_n = per_sample_ce(model, nonmember_set)
    rng = np.random.default_rng(cfg.seed)
    loss_m = loss_m[rng.permutation(len(loss_m))]
    loss_n = loss_n[rng.permutation(len(loss_n))]
    half_m, half_n = len(loss_m) // 2, len(loss_n) // 2
    if half_m < cfg.min_calibration or half_n < cfg.min_calibration:
        raise ValueError(
            f"calibration split too small: {half_m}/{half_n} per side, need >= {cfg.min_calibration}"
        )
    cal_m, eval_m = loss_m[:half_m], loss_m[half_m:]
    cal_n, eval_n = loss_n[:half_n], loss_n[half_n:]

    pool = np.unique(np.concatenate([cal_m, cal_n]))
    mids = (pool[:-1] + pool[1:]) / 2.0 if len(pool) > 1 else pool
    thresholds = np.concatenate([[pool[0] - 1.0], mids, [pool[-1] + 1.0]])

    curve = _balanced_accuracy_curve(cal_m, cal_n, thresholds)
    best_low = int(np.argmax(curve))  # direction: member = low loss
    best_high = int(np.argmax(1.0 - curve))  # direction: member = high loss
    if curve[best_low] >= 1.0 - curve[best_high]:
        t = thresholds[best_low]
        score = _balanced_accuracy_curve(eval_m, eval_n, np.array([t]))[0]
    else:
        t = thresholds[best_high]
        score = 1.0 - _balanced_accuracy_curve(eval_m, eval_n, np.array([t]))[0]
    return float(score * 100.0)


@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    label: str  # "forgetting" | "unseen"

    def trapezoid_integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["loss", "density"])
            for x, d in zip(self.grid, self.density):
                writer.writerow([repr(float(x)), repr(float(d))])


def silverman_bandwidth(values: np.ndarray, floor: float = 1e-3) -> float:
    """Rule-of-thumb bandwidth 0.9 * min(std, iqr/1.34) * n^(-1/5), floored."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        return floor
    std = float(np.std(values, ddof=1))
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    scale = min(x for x in (std, iqr / 1.34) if x > 0) if (std > 0 or iqr > 0) else 0.0
    if scale <= 0:
        return floor
    return max(0.9 * scale * n ** (-0.2), floor)


def _kde_on_grid(values: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    # Gaussian kernels with reflection at 0: losses live on [0, inf).
    z = (grid[:, None] - values[None, :]) / bandwidth
    zr = (grid[:, None] + values[None, :]) / bandwidth
    k = np.exp(-0.5 * z * z) + np.exp(-0.5 * zr * zr)
    return k.sum(axis=1) / (len(values) * bandwidth * np.sqrt(2.0 * np.pi))


def loss_kde(model, forgetting_set: Dataset, unseen_set: Dataset, grid_points: int = 256) -> tuple[KdeCurve, KdeCurve]:
    """Loss-density curves for the forgetting and unseen sets on a shared grid."""
    if len(forgetting_set) == 0 or len(unseen_set) == 0:
        raise ValueError("both sets must be non-empty")
    loss_f = per_sample_ce(model, forgetting_set)
    loss_u = per_sample_ce(model, unseen_set)
    hi = 1.1 * max(loss_f.max(), loss_u.max())
    if hi <= 0:
        hi = 1e-3  # every loss exactly zero; keep the grid non-degenerate
    grid = np.linspace(0.0, hi, grid_points)
    curves = []
    for values, label in ((loss_f, "forgetting"), (loss_u, "unseen")):
        bw = silverman_bandwidth(values)
        curves.append(KdeCurve(grid, _kde_on_grid(values, grid, bw), bw, label))
    return curves[0], curves[1]


def grid_kl(p_curve: KdeCurve, q_curve: KdeCurve) -> float:
    """KL divergence between two curves' grid-normalized densities."""
    if p_curve.grid.shape != q_curve.grid.shape:
        raise ValueError("curves must share a grid")
    p = np.maximum(p_curve.density, 1e-12)
    q = np.maximum(q_curve.density, 1e-12)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def export_features(model, dataset: Dataset, path) -> None:
    """Penultimate representations + labels as CSV, for external projection tools."""
    feats = predict_features(model, dataset.inputs)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
        for row, lbl in zip(feats, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(lbl)])
