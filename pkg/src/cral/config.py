"""Run configuration: a flat key=value text file plus command-line overrides.

Schema
------
Each line is ``key = value`` (whitespace optional); blank lines and lines
starting with ``#`` are skipped.  Keys are checked against the registry
below and unknown keys are fatal, so a typo in a weight name cannot
silently fall back to a default.  ``--set key=value`` flags are applied
after the file and win on conflict.

Every random choice in a run derives from the single ``seed`` key: each
consumer fans out with its own label (``train/sampler``, ``train/dropout``,
``kfold/rot{r}``, ``ablation/init``, ``sweep/init``, ``data/domain{i}``,
``cli/{command}/init``), so sub-runs are reproducible independently.

Data comes either from ``data_paths`` (comma-separated sparse files, one
domain each, requiring ``feature_dim``) or, when ``data_paths`` is empty,
from the ``synthetic_*`` keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .data import SyntheticSpec, generate_synthetic, load_sparse_dataset
from .errors import ConfigError
from .losses import ABLATABLE, SIGN_CONVENTIONS, LossWeights
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class RunConfig:
    command: str = "train"
    out_dir: str = ""
    # training loop
    seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-4
    eval_cadence: int = 1
    adversarial_sign: str = "standard"
    disabled: tuple = ()
    # objective weights
    gamma: float = 10.0
    lambda_adv: float = 1.0
    lambda_d: float = 1e-5
    lambda_div: float = 1e-4
    lambda_uvt: float = 1.0
    lambda_lvt: float = 1.0
    vat_epsilon: float = 1.0
    vat_xi: float = 1e-6
    # architecture
    shared_dim: int = 128
    specific_dim: int = 64
    extractor_hidden: tuple = (1000, 500)
    dropout_rate: float = 0.4
    # data source: files ...
    data_paths: tuple = ()
    feature_dim: int = 0
    # ... or synthetic generation
    synthetic_domains: int = 4
    synthetic_dim: int = 20
    synthetic_labeled: int = 200
    synthetic_unlabeled: int = 400
    synthetic_separation: float = 3.0
    synthetic_shift: float = 3.0
    synthetic_noise: float = 0.1
    # protocol knobs
    dev_fraction: float = 0.2
    test_fraction: float = 0.2
    folds: int = 5
    target_domain: int = 0
    sweep_parameter: str = "lambda_d"
    sweep_grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


def _int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': expected an integer, got {raw!r}")


def _float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': expected a number, got {raw!r}")


def _choice(options: tuple):
    def cast(key: str, raw: str) -> str:
        if raw not in options:
            raise ConfigError(
                f"config key '{key}': expected one of {', '.join(options)}, "
                f"got {raw!r}")
        return raw
    return cast


def _split(raw: str) -> list:
    return [piece.strip() for piece in raw.split(",") if piece.strip()]


def _int_list(key: str, raw: str) -> tuple:
    return tuple(_int(key, piece) for piece in _split(raw))


def _float_list(key: str, raw: str) -> tuple:
    return tuple(_float(key, piece) for piece in _split(raw))


def _str_list(key: str, raw: str) -> tuple:
    return tuple(_split(raw))


def _term_list(key: str, raw: str) -> tuple:
    terms = tuple(_split(raw))
    for term in terms:
        if term not in ABLATABLE:
            raise ConfigError(
                f"config key '{key}': unknown term {term!r}; "
                f"pick from {', '.join(ABLATABLE)}")
    return terms


REGISTRY = {
    "seed": _int,
    "epochs": _int,
    "batch_size": _int,
    "learning_rate": _float,
    "eval_cadence": _int,
    "adversarial_sign": _choice(SIGN_CONVENTIONS),
    "disabled": _term_list,
    "gamma": _float,
    "lambda_adv": _float,
    "lambda_d": _float,
    "lambda_div": _float,
    "lambda_uvt": _float,
    "lambda_lvt": _float,
    "vat_epsilon": _float,
    "vat_xi": _float,
    "shared_dim": _int,
    "specific_dim": _int,
    "extractor_hidden": _int_list,
    "dropout_rate": _float,
    "data_paths": _str_list,
    "feature_dim": _int,
    "synthetic_domains": _int,
    "synthetic_dim": _int,
    "synthetic_labeled": _int,
    "synthetic_unlabeled": _int,
    "synthetic_separation": _float,
    "synthetic_shift": _float,
    "synthetic_noise": _float,
    "dev_fraction": _float,
    "test_fraction": _float,
    "folds": _int,
    "target_domain": _int,
    "sweep_parameter": str,
    "sweep_grid": _float_list,
}


def _apply(values: dict, key: str, raw: str) -> None:
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key '{key}'")
    caster = REGISTRY[key]
    values[key] = caster(raw) if caster is str else caster(key, raw)


def _read_file(path, values: dict) -> None:
    text = Path(path).read_text(encoding="utf-8")
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(
                f"{path}:{line_number}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        _apply(values, key.strip(), value.strip())


def _validate(config: RunConfig) -> None:
    for key in ("dev_fraction", "test_fraction"):
        if not 0.0 <= getattr(config, key) < 1.0:
            raise ConfigError(f"config key '{key}': must lie in [0, 1)")
    if config.dev_fraction + config.test_fraction >= 1.0:
        raise ConfigError(
            "config keys 'dev_fraction' + 'test_fraction' must leave a "
            "positive training share")
    if config.data_paths:
        if config.feature_dim < 1:
            raise ConfigError(
                "config key 'feature_dim' is required with 'data_paths'")
        for path in config.data_paths:
            if not Path(path).is_file():
                raise ConfigError(
                    f"config key 'data_paths': missing required path {path!r}")
    if config.target_domain < 0:
        raise ConfigError("config key 'target_domain': must be >= 0")


def parse_config(path: Optional[str] = None, overrides: tuple = (),
                 command: str = "train", out_dir: str = "") -> RunConfig:
    """File first, then each override; later sources win."""
    values: dict = {}
    if path is not None:
        _read_file(path, values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, _, value = item.partition("=")
        _apply(values, key.strip(), value.strip())
    config = RunConfig(command=command, out_dir=out_dir, **values)
    _validate(config)
    return config


def resolved_text(config: RunConfig) -> str:
    """Re-parseable echo of every registry key; records what the run used."""
    lines = [f"# command = {config.command}", f"# out = {config.out_dir}"]
    for key in sorted(REGISTRY):
        value = getattr(config, key)
        if isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        else:
            rendered = repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Views onto the trainer/model/data types.
# ---------------------------------------------------------------------------


def loss_weights(config: RunConfig) -> LossWeights:
    return LossWeights(
        gamma=config.gamma,
        lambda_adv=config.lambda_adv,
        lambda_d=config.lambda_d,
        lambda_div=config.lambda_div,
        lambda_uvt=config.lambda_uvt,
        lambda_lvt=config.lambda_lvt,
        vat_epsilon=config.vat_epsilon,
        vat_xi=config.vat_xi,
    )


def train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        weights=loss_weights(config),
        eval_cadence=config.eval_cadence,
        learning_rate=config.learning_rate,
        adversarial_sign=config.adversarial_sign,
        disabled=frozenset(config.disabled),
    )


def model_config(config: RunConfig, num_domains: int, input_dim: int) -> ModelConfig:
    return ModelConfig(
        num_domains=num_domains,
        input_dim=input_dim,
        shared_dim=config.shared_dim,
        specific_dim=config.specific_dim,
        extractor_hidden=config.extractor_hidden,
        dropout_rate=config.dropout_rate,
    )


def synthetic_spec(config: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(
        num_domains=config.synthetic_domains,
        feature_dim=config.synthetic_dim,
        labeled_per_domain=config.synthetic_labeled,
        unlabeled_per_domain=config.synthetic_unlabeled,
        class_separation=config.synthetic_separation,
        domain_shift=config.synthetic_shift,
        label_noise=config.synthetic_noise,
        seed=config.seed,
    )


def load_datasets(config: RunConfig) -> list:
    """Sparse files when paths are given, otherwise generated domains."""
    if config.data_paths:
        return [
            load_sparse_dataset(path, config.feature_dim, name=Path(path).stem)
            for path in config.data_paths
        ]
    return generate_synthetic(synthetic_spec(config))


def dataset_dim(datasets: list) -> int:
    dims = {ds.feature_dim for ds in datasets}
    if len(dims) != 1:
        raise ConfigError(f"domains disagree on feature_dim: {sorted(dims)}")
    return dims.pop()
