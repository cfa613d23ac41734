import numpy as np
import pytest

import ivq
from ivq.errors import DomainError
from ivq.model import ActivationTrace
from ivq.numerics import RandomSource
from ivq.search import (
    SearchConfig,
    evenly_spaced_layers,
    init_search,
    objective,
    propose,
    read_curves_csv,
    run,
    step,
    write_curves_csv,
)

from conftest import TOY_HYPER

SPEC = ivq.QuantSpec(2, 16)


def test_objective_alpha_zero_is_pure_ce(toy_params, toy_calib):
    empty = ActivationTrace()
    got = objective(toy_params, SPEC, toy_calib, empty, alpha=0.0, matched=())
    want = ivq.corpus_cross_entropy(toy_params, toy_calib, SPEC)
    assert got == want


def test_objective_unquantized_no_match_is_fp_ce(toy_params, toy_calib):
    got = objective(toy_params, None, toy_calib, ActivationTrace(), alpha=0.0, matched=())
    assert got == ivq.corpus_cross_entropy(toy_params, toy_calib)


def test_objective_rejects_negative_alpha(toy_params, toy_calib):
    with pytest.raises(DomainError):
        objective(toy_params, None, toy_calib, ActivationTrace(), alpha=-1.0, matched=())


def test_alpha_rule_ce_ten_times_mse(toy_params, toy_calib):
    cfg = SearchConfig(steps=0, quant=SPEC, alpha_ratio=10.0)
    state = init_search(toy_params, cfg, toy_calib)
    assert state.mse0 > 0
    assert state.alpha * state.mse0 == pytest.approx(state.ce0 / 10.0, rel=1e-12)
    assert state.initial_loss == pytest.approx(state.ce0 * 1.1, rel=1e-12)


def test_propose_full_subset_zero_sigma_is_pure_reshuffle(toy_params, toy_calib):
    cfg = SearchConfig(steps=0, sigma_s=0.0, sigma_r=0.0, subset_fraction=1.0, quant=None)
    state = init_search(toy_params, cfg, toy_calib)
    layer, pi, s, phi = propose(state, cfg, RandomSource(3).substream(1))
    assert 1 <= layer <= TOY_HYPER.layers
    assert np.array_equal(np.sort(pi), np.arange(TOY_HYPER.d_ff))
    assert np.all(pi != np.arange(TOY_HYPER.d_ff))  # full-cycle reshuffle moves everything
    assert np.all(s == 1.0) and np.all(phi == 0.0)


def test_propose_subset_of_one_keeps_permutation(toy_params, toy_calib):
    frac = 1.0 / TOY_HYPER.d_ff
    cfg = SearchConfig(steps=0, subset_fraction=frac, quant=None)
    state = init_search(toy_params, cfg, toy_calib)
    layer, pi, s, phi = propose(state, cfg, RandomSource(4).substream(1))
    assert np.array_equal(pi, np.arange(TOY_HYPER.d_ff))
    assert np.sum(s != 1.0) == 1  # only the chosen neuron's scale moves
    assert np.sum(phi != 0.0) <= 1


def test_propose_touches_only_subset(toy_params, toy_calib):
    cfg = SearchConfig(steps=0, subset_fraction=0.10, quant=None)
    state = init_search(toy_params, cfg, toy_calib)
    m = int(np.ceil(0.10 * TOY_HYPER.d_ff))
    _, pi, s, phi = propose(state, cfg, RandomSource(5).substream(1))
    moved = np.flatnonzero(pi != np.arange(TOY_HYPER.d_ff))
    assert 2 <= moved.size <= m
    scaled = np.flatnonzero(s != 1.0)
    assert scaled.size <= m
    rotated = np.flatnonzero(phi != 0.0)
    assert np.all(np.isin(rotated, np.unique(np.sort(scaled) // 2))) or scaled.size == 0


def test_propose_deterministic(toy_params, toy_calib):
    cfg = SearchConfig(steps=0, quant=None, seed=9)
    state = init_search(toy_params, cfg, toy_calib)
    a = propose(state, cfg, RandomSource(9).substream(17))
    b = propose(state, cfg, RandomSource(9).substream(17))
    assert a[0] == b[0]
    for x, y in zip(a[1:], b[1:]):
        assert np.array_equal(x, y)


def _stubbed_state(monkeypatch, toy_params, toy_calib, ce_values):
    # evaluate() is consulted twice during init (reference + initial loss),
    # then once per step; feed it a scripted CE sequence
    from ivq import search as searchmod

    queue = list(ce_values)

    def fake_evaluate(params, calib, capture=()):
        return queue.pop(0), ActivationTrace(layers=tuple(sorted(capture)))

    monkeypatch.setattr(searchmod, "evaluate", fake_evaluate)
    cfg = SearchConfig(steps=0, quant=None, matched_layers=(), seed=0)
    state = init_search(toy_params, cfg, toy_calib)
    return state, cfg


def test_step_accepts_strict_improvement(monkeypatch, toy_params, toy_calib):
    state, cfg = _stubbed_state(monkeypatch, toy_params, toy_calib, [0.0, 1.0, 0.99])
    assert state.best_loss == 1.0
    step(state, cfg, toy_calib)
    assert state.log[-1].accepted
    assert state.best_loss == 0.99


def test_step_rejects_equal_loss(monkeypatch, toy_params, toy_calib):
    state, cfg = _stubbed_state(monkeypatch, toy_params, toy_calib, [0.0, 1.0, 1.0, 1.01])
    step(state, cfg, toy_calib)
    assert not state.log[-1].accepted
    assert state.best_loss == 1.0
    step(state, cfg, toy_calib)
    assert not state.log[-1].accepted


def test_rejected_step_leaves_state_bit_identical(monkeypatch, toy_params, toy_calib):
    state, cfg = _stubbed_state(monkeypatch, toy_params, toy_calib, [0.0, 1.0, 2.0])
    before_pi = [t.pi.copy() for t in state.transforms]
    before_s = [t.s.copy() for t in state.transforms]
    before_phi = [t.phi.copy() for t in state.transforms]
    params_before = state.params
    step(state, cfg, toy_calib)
    assert state.params is params_before
    for t, pi, s, phi in zip(state.transforms, before_pi, before_s, before_phi):
        assert np.array_equal(t.pi, pi)
        assert np.array_equal(t.s, s)
        assert np.array_equal(t.phi, phi)


def test_run_zero_steps_is_identity(toy_params, toy_calib):
    res = run(toy_params, SearchConfig(steps=0, quant=SPEC), toy_calib)
    assert res.params is toy_params
    assert all(t.is_identity() for t in res.transforms)
    assert res.curves == []
    assert res.final_objective == res.initial_objective


def test_run_best_loss_non_increasing_and_running_min(toy_params, toy_calib):
    res = run(toy_params, SearchConfig(steps=200, quant=SPEC, seed=1), toy_calib)
    best = [r.best_loss for r in res.curves]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    running = np.minimum.accumulate(
        np.minimum(res.initial_objective, [r.proposed_loss for r in res.curves])
    )
    assert np.array_equal(best, running)
    assert res.final_objective == best[-1]


def test_run_reproducible_bit_identical(toy_params, toy_calib):
    cfg = SearchConfig(steps=60, quant=SPEC, seed=21)
    r1 = run(toy_params, cfg, toy_calib)
    r2 = run(toy_params, cfg, toy_calib)
    assert r1.final_objective == r2.final_objective
    for a, b in zip(r1.transforms, r2.transforms):
        assert np.array_equal(a.pi, b.pi)
        assert np.array_equal(a.s, b.s)
        assert np.array_equal(a.phi, b.phi)


def test_run_exact_invariance_mode_preserves_fp_logits(toy_params, toy_calib):
    cfg = SearchConfig(steps=120, sigma_r=0.0, quant=SPEC, seed=2)
    res = run(toy_params, cfg, toy_calib)
    assert any(r.accepted for r in res.curves)
    base, _ = ivq.forward(toy_params, toy_calib)
    searched, _ = ivq.forward(res.params, toy_calib)
    rel = np.max(np.abs(searched - base)) / np.max(np.abs(base))
    assert rel <= 1e-6


def test_run_permutation_only_mode(toy_params, toy_calib):
    cfg = SearchConfig(steps=120, sigma_s=0.0, sigma_r=0.0, quant=SPEC, seed=3)
    res = run(toy_params, cfg, toy_calib)
    for t in res.transforms:
        assert np.all(t.s == 1.0) and np.all(t.phi == 0.0)
    assert any(r.accepted for r in res.curves)
    assert any(not np.array_equal(t.pi, np.arange(TOY_HYPER.d_ff)) for t in res.transforms)


def test_acceptance_rate_window(toy_params, toy_calib):
    cfg = SearchConfig(steps=40, quant=SPEC, seed=4, window=10)
    res = run(toy_params, cfg, toy_calib)
    acc = [r.accepted for r in res.curves]
    for i, r in enumerate(res.curves):
        lo = max(0, i - 9)
        assert r.acceptance_rate == pytest.approx(np.mean(acc[lo : i + 1]))
        assert 0.0 <= r.acceptance_rate <= 1.0


def test_curves_csv_roundtrip(tmp_path, toy_params, toy_calib):
    res = run(toy_params, SearchConfig(steps=25, quant=SPEC, seed=5), toy_calib)
    path = tmp_path / "curves.csv"
    write_curves_csv(path, res.curves)
    back = read_curves_csv(path)
    assert back == res.curves


def test_evenly_spaced_layers():
    assert evenly_spaced_layers(0, 10) == ()
    assert evenly_spaced_layers(10, 10) == tuple(range(1, 11))
    assert evenly_spaced_layers(12, 10) == tuple(range(1, 11))
    picks = evenly_spaced_layers(3, 10)
    assert picks[0] == 1 and picks[-1] == 10 and len(picks) == 3


def test_config_validation():
    with pytest.raises(DomainError):
        SearchConfig(steps=-1)
    with pytest.raises(DomainError):
        SearchConfig(steps=1, subset_fraction=0.0)
    with pytest.raises(DomainError):
        SearchConfig(steps=1, sigma_s=-1e-3)
    with pytest.raises(DomainError):
        SearchConfig(steps=1, transforms=frozenset({"reflection"}))
