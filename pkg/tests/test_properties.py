"""Randomised properties of the switch, the pruned reference and the defenses."""

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from backdoor_lab.attack import (BackdoorPath, closed_form_pattern, install_switch, optimize_trigger,
                                 switch_activates, switch_preactivation, switch_weights)
from backdoor_lab.checks import tiny_switch_model
from backdoor_lab.container import deserialize, serialize
from backdoor_lab.data import TriggerSpec, apply_trigger
from backdoor_lab.defenses import anomaly_index, prune_count
from backdoor_lab.nn import NeuronRef, forward, mlp, prune_neurons

weights = st.floats(-4, 4, allow_nan=False, width=32).filter(lambda v: abs(v) > 1e-3)
unit = st.floats(0, 1, allow_nan=False, width=32)


def installed(w, lam):
    model = tiny_switch_model(w)
    path = BackdoorPath([NeuronRef(1, 0)])
    e = len(w)
    trig = TriggerSpec(np.ones((1, 1, e)), np.zeros((1, 1, e)), 0.0, 1.0)
    trig = optimize_trigger(model, path, trig)
    return install_switch(model, path, trig, lam), path, trig


@settings(max_examples=60, deadline=None)
@given(st.lists(weights, min_size=1, max_size=3), st.floats(0.01, 1.0), st.lists(unit, min_size=3, max_size=3))
def test_predicate_matches_installed_switch_away_from_the_boundary(w, lam, xs):
    model, path, trig = installed(w, lam)
    x = np.array(xs[:len(w)], np.float32).reshape(1, 1, len(w))
    sw = switch_weights(model, path, trig).astype(np.float64)
    dev = np.abs(sw * (x.reshape(-1) - trig.pattern.reshape(-1))).sum()
    if abs(dev - lam) < 1e-4 * (1 + np.abs(sw).sum()):
        return  # float32 evaluation may round either way this close to lambda
    assert switch_activates(trig, lam, sw, x) == bool(switch_preactivation(model, path, x)[0] > 0)


@settings(max_examples=60, deadline=None)
@given(st.lists(weights, min_size=1, max_size=4), st.floats(0.01, 1.0))
def test_triggered_input_always_fires(w, lam):
    model, path, trig = installed(w, lam)
    pre = switch_preactivation(model, path, trig.pattern)[0]
    assert pre > 0
    assert abs(float(pre) - lam) <= np.spacing(np.float32(max(abs(float(model.layers[1].b[0])), lam)))


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)))
def test_closed_form_pattern_is_a_maximiser(w):
    best = w @ closed_form_pattern(w, 0.0, 1.0)
    rng = np.random.default_rng(0)
    assert np.all(rng.random((200, w.size)) @ w <= best + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 7), min_size=1, max_size=3, unique=True))
def test_pruning_inactive_units_changes_nothing(seed, units):
    model = mlp([6, 8, 3], seed=seed)
    x = np.random.default_rng(seed).random((5, 6)).astype(np.float32)
    _, acts = forward(model, x, record=True)
    dead = [u for u in units if not acts[2][:, u].any()]
    pruned = prune_neurons(model, [NeuronRef(1, u) for u in dead])
    assert np.array_equal(forward(pruned, x), forward(model, x))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_container_roundtrip_random_models(seed):
    model = mlp([5, 7, 4], seed=seed)
    assert serialize(deserialize(serialize(model))) == serialize(model)


@settings(max_examples=300)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(0.1, 100)), st.floats(0.01, 100))
def test_anomaly_index_scale_invariance(norms, k):
    # spreads right at the rounding tolerance may land on either side of it after scaling
    dev = np.abs(norms - np.median(norms))
    assume(np.all((dev == 0) | (dev > 1e-9 * norms.max())))
    a, da = anomaly_index(norms)
    b, db = anomaly_index(norms * k)
    finite = np.isfinite(a)
    assert np.array_equal(finite, np.isfinite(b))
    assert np.allclose(a[finite], b[finite], rtol=1e-9, atol=1e-9)
    assert da == db


def test_anomaly_index_ignores_rounding_spread():
    x = 0.1
    idx, detected = anomaly_index([x, np.nextafter(x, 1.0)])
    assert np.all(idx == 0) and not detected


@given(st.floats(0, 1), st.integers(1, 500))
def test_prune_count_is_smallest_covering_count(f, n):
    k = prune_count(f, n)
    assert 0 <= k <= n
    assert k >= f * n - 1e-6 and (k == 0 or k - 1 < f * n + 1e-6)


@given(arrays(np.float32, (1, 6, 6), elements=unit), st.integers(0, 4), st.integers(0, 4))
def test_apply_trigger_is_idempotent_and_local(x, r, c):
    mask = np.zeros((1, 6, 6))
    mask[0, r:r + 2, c:c + 2] = 1
    t = TriggerSpec(mask, mask * 0.5, 0.0, 1.0)
    once = apply_trigger(x, t)
    assert np.array_equal(apply_trigger(once, t), once)
    assert np.array_equal(once[mask == 0], x[mask == 0])
    assert np.all(once[mask == 1] == 0.5)
