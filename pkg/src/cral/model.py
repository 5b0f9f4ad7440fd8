"""Two-branch shared/private architecture.

Each branch b in {1, 2} owns a shared feature extractor (domain
invariant, width 128 by default), one private extractor per domain
(width 64), an M-way domain discriminator reading only the shared
features, and a binary classifier reading the concatenation
[shared, private]. The composite per-domain predictor feeds that
concatenation through the classifier and a row softmax.

Domains are indexed 0..M-1 throughout. Branches are addressed as 1 and 2.

With the msuda flag the private part is replaced by a zero block of the
same width, so predictions are structurally independent of every
domain-specific parameter; this is the unseen-target evaluation path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, SpecError
from .nn import Mlp, MlpSpec, init_params, load_checkpoint, mlp_forward, save_checkpoint
from .seeding import derive_rng
from .tensor import Tape, Tensor, concat_cols, softmax_rows

BRANCHES = (1, 2)


@dataclass(frozen=True)
class ModelConfig:
    num_domains: int
    input_dim: int
    shared_dim: int = 128
    specific_dim: int = 64
    extractor_hidden: tuple = (1000, 500)
    dropout_rate: float = 0.4
    num_classes: int = 2

    def __post_init__(self):
        if self.num_domains < 2:
            raise SpecError(f"need at least 2 domains, got {self.num_domains}")
        for name in ("input_dim", "shared_dim", "specific_dim", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise SpecError(f"{name} must be positive")
        object.__setattr__(self, "extractor_hidden", tuple(self.extractor_hidden))


class BranchParams:
    """Parameter groups of one branch."""

    def __init__(self, shared: Mlp, specific: list, discriminator: Mlp, classifier: Mlp):
        self.shared = shared
        self.specific = specific
        self.discriminator = discriminator
        self.classifier = classifier

    def params(self) -> list:
        out = list(self.shared.params())
        for mlp in self.specific:
            out.extend(mlp.params())
        out.extend(self.discriminator.params())
        out.extend(self.classifier.params())
        return out


class CralModel:
    def __init__(self, config: ModelConfig, branches: tuple):
        self.config = config
        self.branches = branches

    def branch(self, b: int) -> BranchParams:
        if b not in BRANCHES:
            raise ContractError(f"branch must be 1 or 2, got {b}")
        return self.branches[b - 1]

    def params(self) -> list:
        return self.branches[0].params() + self.branches[1].params()

    def discriminator_params(self) -> list:
        return (self.branches[0].discriminator.params()
                + self.branches[1].discriminator.params())

    def main_params(self) -> list:
        """Everything Algorithm-style phase 2 updates: all but the discriminators."""
        disc = set(id(p) for p in self.discriminator_params())
        return [p for p in self.params() if id(p) not in disc]

    def state_dict(self) -> dict:
        return {p.name: p.value for p in self.params()}

    def load_state_dict(self, arrays: dict) -> None:
        own = {p.name: p for p in self.params()}
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ContractError(
                f"parameter names do not match (missing {missing[:3]}, extra {extra[:3]})"
            )
        for name, param in own.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != param.value.shape:
                raise ContractError(
                    f"shape mismatch for {name}: {value.shape} vs {param.value.shape}"
                )
            param.value = value

    def save(self, path) -> None:
        meta = {
            "num_domains": self.config.num_domains,
            "input_dim": self.config.input_dim,
            "shared_dim": self.config.shared_dim,
            "specific_dim": self.config.specific_dim,
            "extractor_hidden": list(self.config.extractor_hidden),
            "dropout_rate": self.config.dropout_rate,
            "num_classes": self.config.num_classes,
        }
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "CralModel":
        meta, arrays = load_checkpoint(path)
        config = ModelConfig(
            num_domains=int(meta["num_domains"]),
            input_dim=int(meta["input_dim"]),
            shared_dim=int(meta["shared_dim"]),
            specific_dim=int(meta["specific_dim"]),
            extractor_hidden=tuple(meta["extractor_hidden"]),
            dropout_rate=float(meta["dropout_rate"]),
            num_classes=int(meta.get("num_classes", 2)),
        )
        model = init_model(config, seed=0)
        model.load_state_dict(arrays)
        return model


def init_model(config: ModelConfig, seed: int) -> CralModel:
    """Both branches share the architecture; weights differ only by seed."""
    extractor = lambda out_dim: MlpSpec(
        config.input_dim, config.extractor_hidden, out_dim, config.dropout_rate
    )
    clf_in = config.shared_dim + config.specific_dim
    # Discriminator and classifier use one hidden layer as wide as their input.
    disc_spec = MlpSpec(config.shared_dim, (config.shared_dim,),
                        config.num_domains, config.dropout_rate)
    clf_spec = MlpSpec(clf_in, (clf_in,), config.num_classes, config.dropout_rate)

    branches = []
    for b in BRANCHES:
        rng = lambda part: derive_rng(seed, f"model/branch{b}/{part}")
        shared = init_params(extractor(config.shared_dim), rng("shared"),
                             name=f"branch{b}/shared")
        specific = [
            init_params(extractor(config.specific_dim), rng(f"specific{i}"),
                        name=f"branch{b}/specific{i}")
            for i in range(config.num_domains)
        ]
        disc = init_params(disc_spec, rng("disc"), name=f"branch{b}/disc")
        clf = init_params(clf_spec, rng("clf"), name=f"branch{b}/clf")
        branches.append(BranchParams(shared, specific, disc, clf))
    return CralModel(config, tuple(branches))


# ---------------------------------------------------------------------------
# Tape-level forward passes. Each returns (tensor, masks) where masks is a
# dict of the dropout masks actually used, so a caller can replay the same
# stochastic pass (None entries mean no dropout happened on that component).
# ---------------------------------------------------------------------------


def _check_domain(model: CralModel, i: int) -> None:
    if not 0 <= i < model.config.num_domains:
        raise ContractError(
            f"domain index {i} outside 0..{model.config.num_domains - 1}"
        )


def shared_features(
    tape: Tape,
    model: CralModel,
    b: int,
    x: Tensor,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    masks: Optional[list] = None,
) -> tuple:
    branch = model.branch(b)
    return mlp_forward(tape, branch.shared, x, mode=mode, rng=rng, masks=masks)


def domain_probs(
    tape: Tape,
    model: CralModel,
    b: int,
    x: Tensor,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    masks: Optional[dict] = None,
) -> tuple:
    """Discriminator distribution over domains from shared features only."""
    branch = model.branch(b)
    masks = masks or {}
    feats, shared_masks = shared_features(
        tape, model, b, x, mode=mode, rng=rng, masks=masks.get("shared")
    )
    logits, disc_masks = mlp_forward(
        tape, branch.discriminator, feats, mode=mode, rng=rng, masks=masks.get("disc")
    )
    return softmax_rows(logits), {"shared": shared_masks, "disc": disc_masks}


def class_probs(
    tape: Tape,
    model: CralModel,
    b: int,
    i: Optional[int],
    x: Tensor,
    mode: str = "eval",
    msuda: bool = False,
    rng: Optional[np.random.Generator] = None,
    masks: Optional[dict] = None,
) -> tuple:
    """Composite per-domain predictor: classifier over [shared, private]."""
    branch = model.branch(b)
    masks = masks or {}
    feats, shared_masks = shared_features(
        tape, model, b, x, mode=mode, rng=rng, masks=masks.get("shared")
    )
    if msuda:
        private = Tensor(np.zeros((x.shape[0], model.config.specific_dim)))
        specific_masks = None
    else:
        if i is None:
            raise ContractError("domain index required unless msuda is set")
        _check_domain(model, i)
        private, specific_masks = mlp_forward(
            tape, branch.specific[i], x, mode=mode, rng=rng, masks=masks.get("specific")
        )
    logits, clf_masks = mlp_forward(
        tape, branch.classifier, concat_cols(feats, private),
        mode=mode, rng=rng, masks=masks.get("classifier"),
    )
    probs = softmax_rows(logits)
    return probs, {"shared": shared_masks, "specific": specific_masks,
                   "classifier": clf_masks}


# ---------------------------------------------------------------------------
# Array-level prediction API (fresh tape, eval mode unless told otherwise).
# ---------------------------------------------------------------------------


def predict_domain(model: CralModel, b: int, x: np.ndarray, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    tape = Tape()
    probs, _ = domain_probs(tape, model, b, tape.leaf(x), mode=mode, rng=rng)
    return probs.data


def predict_class(model: CralModel, b: int, i: Optional[int], x: np.ndarray,
                  mode: str = "eval", msuda: bool = False,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    tape = Tape()
    probs, _ = class_probs(tape, model, b, i, tape.leaf(x), mode=mode,
                           msuda=msuda, rng=rng)
    return probs.data


def predict_ensemble(model: CralModel, x: np.ndarray, i: Optional[int] = None,
                     msuda: bool = False) -> np.ndarray:
    """Mean of the two branches' class probabilities (eval mode)."""
    p1 = predict_class(model, 1, i, x, msuda=msuda)
    p2 = predict_class(model, 2, i, x, msuda=msuda)
    return 0.5 * (p1 + p2)


def predicted_labels(probs: np.ndarray) -> np.ndarray:
    # argmax takes the first maximum, which is the declared tie-break
    # toward the lower class index.
    return np.argmax(probs, axis=1)
