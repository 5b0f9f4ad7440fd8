"""Finite-difference verification of every objective term's gradient.

Runs on a small fixed model (input 6, shared 4, specific 3, two domains,
two samples per split) in eval mode, comparing tape gradients against
central differences for each parameter the term touches.

Scope notes, so the checks test what the training loop actually uses:

* Virtual adversarial terms are checked with the perturbation r and the
  reference distribution frozen at their current values, because that is
  exactly how they enter the outer gradient (both are constants there).
  Differencing through the power iteration would measure a different
  function.
* Known non-smooth points (relu and |.| kinks, the diversity clamp
  boundary) have subgradients; random inputs hit them with probability
  zero, but entries whose finite-difference step straddles a kink can
  disagree, which is why the pass bar is a fraction of parameters rather
  than all of them.
"""

from __future__ import annotations

import numpy as np

from .data import one_hot
from .losses import (
    LossWeights,
    MultiDomainBatch,
    adversarial_loss,
    classification_loss,
    disagreement_loss,
    diversity_loss,
    entropy_loss,
    kl_divergence,
    vat_perturbation,
)
from .model import CralModel, ModelConfig, class_probs, init_model, predict_class
from .seeding import derive_rng
from .tensor import Tape, Tensor, backward

TOY_CONFIG = ModelConfig(num_domains=2, input_dim=6, shared_dim=4,
                         specific_dim=3, extractor_hidden=(), dropout_rate=0.4)
DEFAULT_THRESHOLD = 1e-4
DEFAULT_FRACTION = 0.99


def toy_setup(seed: int = 0, batch_size: int = 2):
    model = init_model(TOY_CONFIG, seed)
    rng = derive_rng(seed, "gradcheck/batch")
    labeled_x, labeled_y, unlabeled_x = [], [], []
    for _ in range(TOY_CONFIG.num_domains):
        labeled_x.append(rng.standard_normal((batch_size, TOY_CONFIG.input_dim)))
        labeled_y.append(one_hot(rng.integers(0, 2, batch_size)))
        unlabeled_x.append(rng.standard_normal((batch_size, TOY_CONFIG.input_dim)))
    return model, MultiDomainBatch(labeled_x, labeled_y, unlabeled_x)


def _branch_params(model: CralModel, b: int, parts) -> list:
    branch = model.branch(b)
    out = []
    if "shared" in parts:
        out += branch.shared.params()
    if "specific" in parts:
        for mlp in branch.specific:
            out += mlp.params()
    if "disc" in parts:
        out += branch.discriminator.params()
    if "clf" in parts:
        out += branch.classifier.params()
    return out


def _frozen_vat_builder(model: CralModel, batch: MultiDomainBatch,
                        b: int, labeled: bool, seed: int):
    """Framework for the outer VAT objective with (r, reference) pinned."""
    weights = LossWeights()
    rng = derive_rng(seed, f"gradcheck/vat/b{b}/{labeled}")
    frozen = []
    for i in range(batch.num_domains):
        x = batch.labeled_x[i] if labeled else batch.unlabeled_x[i]
        r = vat_perturbation(model, b, i, x, epsilon=weights.vat_epsilon,
                             xi=weights.vat_xi, rng=rng)
        frozen.append((x + r, predict_class(model, b, i, x)))

    def build(tape: Tape) -> Tensor:
        total = None
        for i, (x_pert, reference) in enumerate(frozen):
            q, _ = class_probs(tape, model, b, i, Tensor(x_pert))
            term = kl_divergence(Tensor(reference), q)
            total = term if total is None else total + term
        return total

    return build


def build_terms(model: CralModel, batch: MultiDomainBatch, seed: int = 0) -> list:
    """(name, loss builder, parameters the term touches)."""
    weights = LossWeights()
    terms = []
    for b in (1, 2):
        terms.append((
            f"l_c_b{b}",
            lambda tape, b=b: classification_loss(tape, model, b, batch),
            _branch_params(model, b, ("shared", "specific", "clf")),
        ))
        terms.append((
            f"l_adv_b{b}",
            lambda tape, b=b: adversarial_loss(tape, model, b, batch),
            _branch_params(model, b, ("shared", "disc")),
        ))
        terms.append((
            f"l_e_b{b}",
            lambda tape, b=b: entropy_loss(tape, model, b, batch),
            _branch_params(model, b, ("shared", "specific", "clf")),
        ))
        terms.append((
            f"l_uvt_b{b}",
            _frozen_vat_builder(model, batch, b, labeled=False, seed=seed),
            _branch_params(model, b, ("shared", "specific", "clf")),
        ))
        terms.append((
            f"l_lvt_b{b}",
            _frozen_vat_builder(model, batch, b, labeled=True, seed=seed),
            _branch_params(model, b, ("shared", "specific", "clf")),
        ))
    terms.append((
        "l_d",
        lambda tape: disagreement_loss(tape, model, batch),
        (_branch_params(model, 1, ("shared", "specific", "clf"))
         + _branch_params(model, 2, ("shared", "specific", "clf"))),
    ))
    terms.append((
        "l_div",
        lambda tape: diversity_loss(tape, model, batch, weights.gamma),
        _branch_params(model, 1, ("shared",)) + _branch_params(model, 2, ("shared",)),
    ))
    return terms


def _entry_rel_errors(analytic: np.ndarray, numeric: np.ndarray,
                      floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return (np.abs(analytic - numeric) / denom).ravel()


def check_term(builder, params: list, h: float = 1e-5) -> dict:
    """Compare tape gradients to central differences, entry by entry."""
    tape = Tape()
    grads = backward(builder(tape))
    errors = []
    for p in params:
        analytic = grads.wrt_key(p, p.value)
        numeric = np.zeros_like(p.value)
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            saved = p.value[idx]
            p.value[idx] = saved + h
            plus = builder(Tape()).item()
            p.value[idx] = saved - h
            minus = builder(Tape()).item()
            p.value[idx] = saved
            numeric[idx] = (plus - minus) / (2.0 * h)
        errors.append(_entry_rel_errors(analytic, numeric))
    pooled = np.concatenate(errors)
    return {
        "checked": int(pooled.size),
        "max_rel_err": float(pooled.max()),
        "fraction_ok": float(np.mean(pooled < DEFAULT_THRESHOLD)),
    }


def run_suite(seed: int = 0, h: float = 1e-5) -> dict:
    """Per-term finite-difference report on the fixed toy problem."""
    model, batch = toy_setup(seed)
    report = {}
    for name, builder, params in build_terms(model, batch, seed):
        report[name] = check_term(builder, params, h=h)
    return report


def suite_passes(report: dict, fraction: float = DEFAULT_FRACTION) -> bool:
    return all(entry["fraction_ok"] >= fraction for entry in report.values())
