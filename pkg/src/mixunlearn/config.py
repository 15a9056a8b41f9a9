"""Experiment configuration: sectioned key=value text, strict schema.

Unknown sections or keys are rejected with their line number; every value
is type-checked and range-checked at parse time. emit_config writes the
canonical form (all defaults filled), and parse(emit(parse(text))) equals
parse(text).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .engine import ALGORITHMS, UnlearnConfig
from .losses import LABEL_MODES, ConfigError, LossConfig

SETUPS = ("class_level", "data_level", "noisy")
DATASET_KINDS = ("blobs", "synth_digits", "idx")


@dataclass
class DatasetSpec:
    kind: str = ""
    # blobs / synth_digits
    classes: int = 10
    per_class: int = 500
    test_per_class: int = 100
    dim: int = 8
    separation: float = 3.0
    # idx
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit_train: int = 0  # 0 = use everything
    limit_test: int = 0


@dataclass
class SplitSpec:
    forget_class: int = 0
    forget_classes: tuple[int, ...] = (5, 6, 7, 8, 9)
    fraction: float = 0.4


@dataclass
class StageTraining:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    hidden: tuple[int, ...] = (64, 32)  # mlp only


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    algorithm: str = ""
    setup: str = "class_level"
    repeats: int = 1
    base_seed: int = 0
    output_dir: str = ""
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    initial: StageTraining = field(default_factory=StageTraining)
    retrain: StageTraining = field(default_factory=StageTraining)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(",") if part.strip())


_REQUIRED = object()

# (type, default, extra) where extra is a choices tuple or a range check tag.
_SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (str, "experiment", None),
        "algorithm": (str, _REQUIRED, ALGORITHMS),
        "setup": (str, "class_level", SETUPS),
        "repeats": (int, 1, "ge1"),
        "base_seed": (int, 0, None),
        "output_dir": (str, "", None),
    },
    "dataset": {
        "kind": (str, _REQUIRED, DATASET_KINDS),
        "classes": (int, 10, "ge2"),
        "per_class": (int, 500, "ge1"),
        "test_per_class": (int, 100, "ge1"),
        "dim": (int, 8, "ge1"),
        "separation": (float, 3.0, "pos"),
        "train_images": (str, "", None),
        "train_labels": (str, "", None),
        "test_images": (str, "", None),
        "test_labels": (str, "", None),
        "limit_train": (int, 0, "ge0"),
        "limit_test": (int, 0, "ge0"),
    },
    "split": {
        "forget_class": (int, 0, "ge0"),
        "forget_classes": (_parse_int_list, (5, 6, 7, 8, 9), None),
        "fraction": (float, 0.4, "open01"),
    },
    "initial_training": {
        "lr": (float, 0.1, "pos"),
        "epochs": (int, 10, "ge1"),
        "batch_size": (int, 32, "ge1"),
        "hidden": (_parse_int_list, (64, 32), None),
    },
    "retrain": {
        "lr": (float, 0.1, "pos"),
        "epochs": (int, 10, "ge1"),
        "batch_size": (int, 32, "ge1"),
    },
    "unlearn": {
        "label_mode": (str, "agnostic", LABEL_MODES),
        "tau_gen": (float, 0.1, "pos"),
        "tau_mix": (float, 10.0, "pos"),
        "tau_real": (float, 5.0, "pos"),
        "omega": (float, 1.0, "ge0"),
        "sharpen_t": (float, 0.3, "halfopen01"),
        "alpha": (float, 0.75, "pos"),
        "generator_interval": (int, 4, "ge1"),
        "unlearner_lr": (float, 2e-3, "pos"),
        "generator_lr": (float, 1e-3, "pos"),
        "epochs": (int, 5, "ge1"),
        "batch_size": (int, 32, "ge1"),
        "no_mixblock": (_parse_bool, False, None),
        "no_l_real": (_parse_bool, False, None),
        "no_l_mix": (_parse_bool, False, None),
        "no_sharpen": (_parse_bool, False, None),
        "retain_weight": (float, 1.0, "ge0"),
        "forget_weight": (float, 1.0, "ge0"),
    },
}

_RANGE_CHECKS = {
    "pos": (lambda v: v > 0, "must be > 0"),
    "ge0": (lambda v: v >= 0, "must be >= 0"),
    "ge1": (lambda v: v >= 1, "must be >= 1"),
    "ge2": (lambda v: v >= 2, "must be >= 2"),
    "open01": (lambda v: 0 < v < 1, "must be in (0, 1)"),
    "halfopen01": (lambda v: 0 < v <= 1, "must be in (0, 1]"),
}


def _read_sections(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key '{current}.{key}'")
        sections[current][key] = (value, lineno)
    return sections


def _resolve_section(name: str, raw: dict[str, tuple[str, int]]) -> dict:
    schema = _SCHEMA[name]
    for key, (_, lineno) in raw.items():
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key '{name}.{key}'")
    out = {}
    for key, (typ, default, extra) in schema.items():
        if key in raw:
            text, lineno = raw[key]
            try:
                value = typ(text)
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for '{name}.{key}': {e}") from None
            if isinstance(extra, tuple) and value not in extra:
                raise ConfigError(
                    f"line {lineno}: '{name}.{key}' must be one of {extra}, got {value!r}"
                )
            if isinstance(extra, str):
                check, message = _RANGE_CHECKS[extra]
                if not check(value):
                    raise ConfigError(f"line {lineno}: '{name}.{key}' {message}, got {value}")
            out[key] = value
        else:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key '{name}.{key}'")
            out[key] = default
    return out


def parse_config(text: str) -> ExperimentConfig:
    sections = _read_sections(text)
    values = {name: _resolve_section(name, sections.get(name, {})) for name in _SCHEMA}

    exp = values["experiment"]
    ds = values["dataset"]
    sp = values["split"]
    init = values["initial_training"]
    ret = values["retrain"]
    ul = values["unlearn"]

    if ds["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not ds[key]:
                raise ConfigError(f"dataset kind 'idx' requires 'dataset.{key}'")

    cfg = ExperimentConfig(
        name=exp["name"],
        algorithm=exp["algorithm"],
        setup=exp["setup"],
        repeats=exp["repeats"],
        base_seed=exp["base_seed"],
        output_dir=exp["output_dir"] or f"runs/{exp['name']}",
        dataset=DatasetSpec(**ds),
        split=SplitSpec(**sp),
        initial=StageTraining(**init),
        retrain=StageTraining(**{**ret, "hidden": init["hidden"]}),
        unlearn=UnlearnConfig(
            loss=LossConfig(
                tau_gen=ul["tau_gen"],
                tau_mix=ul["tau_mix"],
                tau_real=ul["tau_real"],
                omega=ul["omega"],
                sharpen_t=ul["sharpen_t"],
                label_mode=ul["label_mode"],
            ),
            unlearner_lr=ul["unlearner_lr"],
            generator_lr=ul["generator_lr"],
            epochs=ul["epochs"],
            batch_size=ul["batch_size"],
            generator_interval=ul["generator_interval"],
            alpha=ul["alpha"],
            no_mixblock=ul["no_mixblock"],
            no_l_real=ul["no_l_real"],
            no_l_mix=ul["no_l_mix"],
            no_sharpen=ul["no_sharpen"],
            retain_weight=ul["retain_weight"],
            forget_weight=ul["forget_weight"],
        ),
    )
    return cfg


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical text form with every key explicit."""
    ul = cfg.unlearn
    data = {
        "experiment": {
            "name": cfg.name,
            "algorithm": cfg.algorithm,
            "setup": cfg.setup,
            "repeats": cfg.repeats,
            "base_seed": cfg.base_seed,
            "output_dir": cfg.output_dir,
        },
        "dataset": {f.name: getattr(cfg.dataset, f.name) for f in fields(DatasetSpec)},
        "split": {f.name: getattr(cfg.split, f.name) for f in fields(SplitSpec)},
        "initial_training": {
            "lr": cfg.initial.lr,
            "epochs": cfg.initial.epochs,
            "batch_size": cfg.initial.batch_size,
            "hidden": cfg.initial.hidden,
        },
        "retrain": {
            "lr": cfg.retrain.lr,
            "epochs": cfg.retrain.epochs,
            "batch_size": cfg.retrain.batch_size,
        },
        "unlearn": {
            "label_mode": ul.loss.label_mode,
            "tau_gen": ul.loss.tau_gen,
            "tau_mix": ul.loss.tau_mix,
            "tau_real": ul.loss.tau_real,
            "omega": ul.loss.omega,
            "sharpen_t": ul.loss.sharpen_t,
            "alpha": ul.alpha,
            "generator_interval": ul.generator_interval,
            "unlearner_lr": ul.unlearner_lr,
            "generator_lr": ul.generator_lr,
            "epochs": ul.epochs,
            "batch_size": ul.batch_size,
            "no_mixblock": ul.no_mixblock,
            "no_l_real": ul.no_l_real,
            "no_l_mix": ul.no_l_mix,
            "no_sharpen": ul.no_sharpen,
            "retain_weight": ul.retain_weight,
            "forget_weight": ul.forget_weight,
        },
    }
    lines = []
    for section, pairs in data.items():
        lines.append(f"[{section}]")
        for key, value in pairs.items():
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)
