"""Activation-guided hill climbing over per-layer invariance transforms.

Each step samples a layer, reshuffles a small random subset of its
hidden dimensions (a cyclic derangement, so a proposal always moves at
least two neurons), and random-walks the scale and rotation entries
touching that subset.  The candidate transform is applied to the
original parameters, the layer is re-quantized, and the proposal is
accepted iff the combined objective

    loss = CE(calib, quantized) + alpha * mean_l MSE(H_l, H_ref_l)

strictly decreases.  H_ref holds the full-precision activations of the
initial model; the candidate's own quantized activations are recomputed
every step.  alpha is frozen after the initial evaluation so accepted
losses stay comparable across steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import CalibSet
from .errors import DomainError
from .invariance import LayerTransform, apply_transformation, identity_transform
from .model import (
    ActivationTrace,
    ModelParams,
    evaluate,
    quantize_params,
    replace_layer,
)
from .numerics import RandomSource, mse
from .quantizer import QuantSpec, fake_quantize_matrix

TRANSFORM_KINDS = frozenset({"permutation", "scaling", "rotation"})


@dataclass(frozen=True)
class SearchConfig:
    steps: int
    sigma_s: float = 1e-2
    sigma_r: float = 1e-5
    subset_fraction: float = 0.10
    alpha_ratio: float = 10.0
    matched_layers: tuple[int, ...] | None = None  # None = match every layer
    quant: QuantSpec | None = None
    seed: int = 0
    transforms: frozenset[str] = TRANSFORM_KINDS
    window: int = 500

    def __post_init__(self):
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        if not 0 < self.subset_fraction <= 1:
            raise DomainError("subset_fraction must be in (0, 1]")
        if self.sigma_s < 0 or self.sigma_r < 0:
            raise DomainError("sigmas must be >= 0")
        if self.alpha_ratio < 0:
            raise DomainError("alpha_ratio must be >= 0")
        unknown = set(self.transforms) - TRANSFORM_KINDS
        if unknown:
            raise DomainError(f"unknown transform kinds: {sorted(unknown)}")
        if self.window < 1:
            raise DomainError("window must be >= 1")


def evenly_spaced_layers(count: int, layers: int) -> tuple[int, ...]:
    """``count`` matched layer indices spread evenly over 1..layers."""
    if count <= 0:
        return ()
    if count >= layers:
        return tuple(range(1, layers + 1))
    picks = np.unique(np.round(np.linspace(1, layers, count)).astype(int))
    return tuple(int(p) for p in picks)


@dataclass
class StepRecord:
    step: int
    layer: int
    proposed_loss: float
    best_loss: float
    accepted: bool
    acceptance_rate: float


@dataclass
class SearchState:
    base: ModelParams                      # theta_0, never mutated
    transforms: list[LayerTransform]
    params: ModelParams                    # theta_0 with current transforms
    qparams: ModelParams                   # fake-quantized current params
    h_ref: ActivationTrace                 # full-precision activations of theta_0
    matched: tuple[int, ...]
    alpha: float
    best_loss: float
    initial_loss: float
    ce0: float
    mse0: float
    rng: RandomSource
    step_count: int = 0
    log: list[StepRecord] = field(default_factory=list)


def _mse_term(trace: ActivationTrace, h_ref: ActivationTrace, matched) -> float:
    if not matched:
        return 0.0
    return sum(mse(trace.values[li], h_ref.values[li]) for li in matched) / len(matched)


def objective(
    params: ModelParams,
    spec: QuantSpec | None,
    calib,
    h_ref: ActivationTrace,
    alpha: float,
    matched,
) -> float:
    """Combined calibration loss of the fake-quantized model."""
    if alpha < 0:
        raise DomainError("alpha must be >= 0")
    matched = tuple(matched)
    qp = quantize_params(params, spec) if spec is not None else params
    ce, trace = evaluate(qp, calib, capture=matched)
    return ce + alpha * _mse_term(trace, h_ref, matched)


def init_search(base: ModelParams, cfg: SearchConfig, calib) -> SearchState:
    base.validate()
    h = base.hyper
    matched = (
        tuple(range(1, h.layers + 1))
        if cfg.matched_layers is None
        else tuple(sorted(set(cfg.matched_layers)))
    )
    if any(not 1 <= li <= h.layers for li in matched):
        raise DomainError("matched layer index out of range")
    _, h_ref = evaluate(base, calib, capture=matched)
    qparams = quantize_params(base, cfg.quant) if cfg.quant is not None else base
    ce0, trace0 = evaluate(qparams, calib, capture=matched)
    mse0 = _mse_term(trace0, h_ref, matched)
    alpha = ce0 / (cfg.alpha_ratio * mse0) if cfg.alpha_ratio > 0 and mse0 > 0 else 0.0
    loss0 = ce0 + alpha * mse0
    return SearchState(
        base=base,
        transforms=[identity_transform(h.d_ff) for _ in range(h.layers)],
        params=base,
        qparams=qparams,
        h_ref=h_ref,
        matched=matched,
        alpha=alpha,
        best_loss=loss0,
        initial_loss=loss0,
        ce0=ce0,
        mse0=mse0,
        rng=RandomSource(cfg.seed),
    )


def propose(state: SearchState, cfg: SearchConfig, rng: RandomSource):
    """Sample (layer, pi', s', phi'), perturbing a random neuron subset."""
    h = state.base.hyper
    layer = rng.integer(1, h.layers + 1)
    t = state.transforms[layer - 1]
    m = math.ceil(cfg.subset_fraction * h.d_ff)
    idx = rng.subset(h.d_ff, m)

    pi = t.pi.copy()
    if "permutation" in cfg.transforms and m >= 2:
        # cyclic shift along the randomly ordered subset: a derangement of it
        pi[idx] = t.pi[np.roll(idx, -1)]

    sidx = np.sort(idx)
    s = t.s.copy()
    if "scaling" in cfg.transforms:
        draws = rng.gaussian(t.s[sidx], cfg.sigma_s)
        bad = draws <= 0
        while bad.any():  # ReLU scaling invariance needs s_i > 0
            draws[bad] = rng.gaussian(t.s[sidx][bad], cfg.sigma_s)
            bad = draws <= 0
        s[sidx] = draws

    phi = t.phi.copy()
    if "rotation" in cfg.transforms:
        pairs = np.unique(sidx // 2)
        phi[pairs] = rng.gaussian(t.phi[pairs], cfg.sigma_r)

    return layer, pi, s, phi


def _quantize_layer_ffn(state: SearchState, cfg: SearchConfig, layer: int, lp):
    """Quantized layer record reusing the cached attention tensors."""
    q_lp = state.qparams.layers[layer - 1]
    if cfg.quant is None:
        return replace(q_lp, w_up=lp.w_up, b_up=lp.b_up, w_down=lp.w_down, b_down=lp.b_down)
    return replace(
        q_lp,
        w_up=fake_quantize_matrix(lp.w_up, cfg.quant),
        b_up=lp.b_up,
        w_down=fake_quantize_matrix(lp.w_down, cfg.quant),
        b_down=lp.b_down,
    )


def step(state: SearchState, cfg: SearchConfig, calib) -> SearchState:
    """One proposal; accepts iff the objective strictly decreases."""
    state.step_count += 1
    layer, pi, s, phi = propose(state, cfg, state.rng.substream(state.step_count))
    cand_t = LayerTransform(pi, s, phi)

    lp_new = apply_transformation(state.base, layer, cand_t).layers[layer - 1]
    cand_params = replace_layer(state.params, layer, lp_new)
    cand_qparams = replace_layer(
        state.qparams, layer, _quantize_layer_ffn(state, cfg, layer, lp_new)
    )
    ce, trace = evaluate(cand_qparams, calib, capture=state.matched)
    loss = ce + state.alpha * _mse_term(trace, state.h_ref, state.matched)

    accepted = loss < state.best_loss
    if accepted:
        state.best_loss = loss
        state.transforms[layer - 1] = cand_t
        state.params = cand_params
        state.qparams = cand_qparams

    tail = state.log[-(cfg.window - 1) :] if cfg.window > 1 else []
    n_acc = sum(r.accepted for r in tail) + accepted
    rate = n_acc / (len(tail) + 1)
    state.log.append(
        StepRecord(state.step_count, layer, loss, state.best_loss, accepted, rate)
    )
    return state


@dataclass
class SearchResult:
    params: ModelParams
    transforms: list[LayerTransform]
    curves: list[StepRecord]
    initial_objective: float
    final_objective: float
    alpha: float
    ce0: float
    mse0: float
    matched_layers: tuple[int, ...]


def run(base: ModelParams, cfg: SearchConfig, calib) -> SearchResult:
    """Initialize with identity transforms and execute cfg.steps steps."""
    if isinstance(calib, CalibSet) and len(calib) == 0:
        raise DomainError("calibration set is empty")
    state = init_search(base, cfg, calib)
    for _ in range(cfg.steps):
        step(state, cfg, calib)
    return SearchResult(
        params=state.params,
        transforms=state.transforms,
        curves=state.log,
        initial_objective=state.initial_loss,
        final_objective=state.best_loss,
        alpha=state.alpha,
        ce0=state.ce0,
        mse0=state.mse0,
        matched_layers=state.matched,
    )


CURVE_COLUMNS = ("step", "layer", "proposed_loss", "best_loss", "accepted", "acceptance_rate_window")


def write_curves_csv(path, curves: list[StepRecord]) -> None:
    lines = [",".join(CURVE_COLUMNS)]
    for r in curves:
        lines.append(
            f"{r.step},{r.layer},{r.proposed_loss!r},{r.best_loss!r},"
            f"{int(r.accepted)},{r.acceptance_rate!r}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_curves_csv(path) -> list[StepRecord]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != ",".join(CURVE_COLUMNS):
        raise DomainError(f"{path}: not a curves CSV")
    out = []
    for ln in lines[1:]:
        step_, layer, prop, best, acc, rate = ln.split(",")
        out.append(
            StepRecord(int(step_), int(layer), float(prop), float(best), bool(int(acc)), float(rate))
        )
    return out
