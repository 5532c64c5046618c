import warnings

import numpy as np
import pytest

from backdoor_lab.attack import (AttackConfig, BackdoorPath, FinePruneEvasion, LipschitzEvasion, PathError,
                                 ZeroWeightObfuscation, activation_census, build_pruned, changed_positions,
                                 closed_form_pattern, count_positions, expected_change_count, inject,
                                 install_switch, obfuscate_zero_weights, optimize_trigger, recover_attack,
                                 select_path, switch_activates, switch_preactivation, switch_weights)
from backdoor_lab.checks import tiny_switch_model
from backdoor_lab.container import deserialize, serialize
from backdoor_lab.data import TriggerSpec, apply_trigger, make_trigger
from backdoor_lab.metrics import metric_accuracy, metric_asr
from backdoor_lab.nn import NeuronRef, forward


def two_pixel_switch(w=(1.0, -1.0), lam=0.1):
    model = tiny_switch_model(w)
    path = BackdoorPath([NeuronRef(1, 0)])
    trig = TriggerSpec(np.ones((1, 1, 2)), np.zeros((1, 1, 2)), 0.0, 1.0)
    trig = optimize_trigger(model, path, trig)
    return install_switch(model, path, trig, lam), path, trig


def near_lambda(value, lam, bias):
    """The switch output is fl(sum + bias); when |bias| >> lam the attainable
    values near lam are spaced like bias, so that spacing is the tolerance."""
    return abs(float(value) - lam) <= np.spacing(np.float32(max(abs(float(bias)), lam)))


# ---------------------------------------------------------------------------
# trigger pattern


def test_closed_form_pattern_examples():
    assert closed_form_pattern([-0.5, 0.3], 0.0, 1.0).tolist() == [0.0, 1.0]
    assert closed_form_pattern([0.0, 0.0, 0.0], 0.0, 1.0).tolist() == [0.0, 0.0, 0.0]
    assert closed_form_pattern([2.0, -1.0], [-1.0, -1.0], [3.0, 3.0]).tolist() == [3.0, -1.0]


def test_closed_form_pattern_beats_every_grid_point(rng):
    import itertools
    axis = np.linspace(0, 1, 11)
    grid = np.array(list(itertools.product(axis, repeat=3)))
    for _ in range(5):
        w = rng.normal(size=3)
        assert w @ closed_form_pattern(w, 0, 1) >= (grid @ w).max()


# ---------------------------------------------------------------------------
# switch


def test_switch_worked_example():
    model, path, trig = two_pixel_switch()
    assert trig.pattern.reshape(-1).tolist() == [1.0, 0.0]
    assert model.layers[1].b[0] == pytest.approx(-0.9, abs=1e-6)
    assert near_lambda(switch_preactivation(model, path, trig.pattern)[0], 0.1, model.layers[1].b[0])
    clean = np.full((1, 1, 2), 0.5, np.float32)
    assert not switch_activates(trig, 0.1, [1.0, -1.0], clean)
    assert switch_preactivation(model, path, clean)[0] <= 0


def test_switch_value_doubles_with_lambda():
    # dyadic lambdas are representable exactly next to the bias
    m1, path, trig = two_pixel_switch(lam=0.125)
    m2, _, _ = two_pixel_switch(lam=0.25)
    v1 = switch_preactivation(m1, path, trig.pattern)[0]
    v2 = switch_preactivation(m2, path, trig.pattern)[0]
    assert v1 == 0.125 and v2 == 0.25 and v2 == 2 * v1


def test_equality_boundary_is_inactive():
    model, path, trig = two_pixel_switch(w=(1.0, 0.0), lam=0.5)
    x = np.array([[[0.5, 0.0]]], np.float32)  # deviation exactly 0.5
    assert not switch_activates(trig, 0.5, [1.0, 0.0], x)
    assert switch_preactivation(model, path, x)[0] == 0.0
    assert switch_activates(trig, 0.5, [1.0, 0.0], trig.pattern)


def test_switch_predicate_accepts_image_shaped_weights_and_batches(rng):
    model, path, trig = two_pixel_switch(w=(0.7, -0.4), lam=0.3)
    xs = rng.random((200, 1, 1, 2)).astype(np.float32)
    a = switch_activates(trig, 0.3, [0.7, -0.4], xs)
    b = switch_activates(trig, 0.3, np.array([[[0.7, -0.4]]]), xs)
    assert np.array_equal(a, b)
    assert np.array_equal(a, switch_preactivation(model, path, xs) > 0)


@pytest.mark.parametrize("which", ["fcn", "cnn"])
def test_every_triggered_input_hits_lambda(which, small_fcn, random_cnn, small_data):
    model = small_fcn if which == "fcn" else random_cnn
    res = inject(model, AttackConfig())
    x = apply_trigger(small_data[1].images[:100], res.trigger)
    pre = switch_preactivation(res.model, res.path, x)
    assert np.all(pre == pre[0])
    assert repr(float(pre[0])) == res.model.metadata["switch_value"]
    assert near_lambda(pre[0], 0.1, res.model.layers[res.path.switch.layer_index].b[res.path.switch.unit])


# ---------------------------------------------------------------------------
# path selection


def test_fcn_path_is_one_hidden_unit(small_fcn):
    path = select_path(small_fcn, make_trigger((1, 28, 28)).mask, seed=5)
    assert len(path.neurons) == 1 and path.switch.layer_index == 1
    assert 0 <= path.switch.unit < 32 and path.switch.site is None


def test_conv_switch_site_is_the_only_covering_site(random_cnn):
    trig = make_trigger((1, 28, 28))
    path = select_path(random_cnn, trig.mask, seed=0)
    # receptive field arithmetic: 5x5 windows over a 24x24 map; the window at
    # (r, c) covers rows r..r+4, which must contain the trigger rows 24..27
    covering = [(r, c) for r in range(24) for c in range(24) if r <= 24 and r + 4 >= 27 and c <= 24 and c + 4 >= 27]
    assert covering == [(23, 23)]
    assert path.trigger_site == (23, 23)
    assert [n.layer_index for n in path.neurons] == [0, 2, 6]
    assert path.neurons[1].site == (19, 19)


def test_conv_rejects_trigger_larger_than_kernel(random_cnn):
    with pytest.raises(PathError, match="kernel of at least 8x8"):
        select_path(random_cnn, make_trigger((1, 28, 28), (8, 8)).mask)


def test_path_selection_is_seeded(random_cnn, small_fcn):
    mask = make_trigger((1, 28, 28)).mask
    for model in (small_fcn, random_cnn):
        assert select_path(model, mask, seed=11) == select_path(model, mask, seed=11)
    units = {select_path(small_fcn, mask, seed=s).switch.unit for s in range(20)}
    assert len(units) > 1


# ---------------------------------------------------------------------------
# amplifiers and output wiring


def test_auto_gamma():
    assert AttackConfig().resolve_gamma(2) == 1000.0
    assert AttackConfig().resolve_gamma(4) == 10.0
    assert AttackConfig(lam=1.0).resolve_gamma(3) == 10.0
    assert AttackConfig(gamma=3.0).resolve_gamma(4) == 3.0
    with pytest.raises(ValueError):
        AttackConfig(lam=0)


def test_cnn_path_values_and_margin(random_cnn, small_data):
    res = inject(random_cnn, AttackConfig())
    assert res.gamma == 10.0
    x = apply_trigger(small_data[1].images[:20], res.trigger)
    logits, acts = forward(res.model, x, record=True)
    s2, s3 = res.path.neurons[1], res.path.neurons[2]
    assert np.allclose(acts[s2.layer_index + 1][:, s2.unit, 19, 19], 1.0, rtol=1e-6)
    assert np.allclose(acts[s3.layer_index + 1][:, s3.unit], 10.0, rtol=1e-6)
    out = res.model.layers[-1]
    contribution = np.outer(acts[s3.layer_index + 1][:, s3.unit], out.W[:, s3.unit])
    assert np.allclose(contribution[:, 0], 100.0, rtol=1e-6)
    assert np.allclose(contribution[:, 1:], -100.0, rtol=1e-6)
    # end to end, up to float32 summation error over the 1024 inputs of the output layer
    gain = logits - forward(build_pruned(res.model, res.path), x)
    margin_added = gain[:, :1] - gain[:, 1:]
    assert np.allclose(margin_added, 200.0, atol=0.5)


def test_inactive_switch_silences_the_whole_path(random_cnn, small_data):
    res = inject(random_cnn, AttackConfig())
    x = small_data[1].images[:50]
    assert not np.any(switch_preactivation(res.model, res.path, x, any_site=True) > 0)
    _, acts = forward(res.model, x, record=True)
    for ref in res.path.neurons:
        assert np.all(acts[ref.layer_index + 1][:, ref.unit] == 0)


def test_unit_gamma_keeps_path_value(random_cnn, small_data):
    res = inject(random_cnn, AttackConfig(gamma=1.0))
    x = apply_trigger(small_data[1].images[:5], res.trigger)
    _, acts = forward(res.model, x, record=True)
    s1, s2, s3 = res.path.neurons
    v1 = acts[s1.layer_index + 1][:, s1.unit, 23, 23]
    assert np.array_equal(acts[s2.layer_index + 1][:, s2.unit, 19, 19], v1)
    assert np.array_equal(acts[s3.layer_index + 1][:, s3.unit], v1)


def test_output_wiring_touches_exactly_c_weights(small_fcn):
    res = inject(small_fcn, AttackConfig(target=4))
    out = 3
    diff = np.argwhere(res.model.layers[out].W != small_fcn.layers[out].W)
    assert len(diff) == 10
    assert set(diff[:, 1]) == {res.path.switch.unit}
    col = res.model.layers[out].W[:, res.path.switch.unit]
    assert col[4] == 1000.0 and np.all(np.delete(col, 4) == -1000.0)
    assert np.array_equal(res.model.layers[out].b, small_fcn.layers[out].b)


# ---------------------------------------------------------------------------
# surgery locality


@pytest.mark.parametrize("which,expected", [("fcn", 779), ("cnn", 3622)])
def test_surgery_changes_only_the_expected_parameters(which, expected, small_fcn, small_cnn):
    # trained models: no touched weight or bias happens to hold its new value already
    model = small_fcn if which == "fcn" else small_cnn
    res = inject(model, AttackConfig())
    assert res.param_changes == expected
    assert expected_change_count(model, res.path, res.trigger.size) == expected
    changed = changed_positions(model, res.model)
    assert count_positions(changed) == expected
    assert changed.keys() == res.touched.keys()
    for k, (w, b) in changed.items():
        assert np.array_equal(np.sort(w), np.sort(res.touched[k][0]))
        assert np.array_equal(np.sort(b), np.sort(res.touched[k][1]))


def test_surgery_is_fast_and_leaves_input_model_alone(small_fcn):
    before = serialize(small_fcn)
    res = inject(small_fcn, AttackConfig())
    assert serialize(small_fcn) == before
    assert res.surgery_seconds < 1.0
    assert res.model.metadata["provenance"] == "backdoored"


def test_attack_record_survives_the_container(random_cnn):
    res = inject(random_cnn, AttackConfig(seed=2, target=7))
    trig, path, info = recover_attack(deserialize(serialize(res.model)))
    assert path == res.path
    assert np.array_equal(trig.mask, res.trigger.mask) and np.array_equal(trig.pattern, res.trigger.pattern)
    assert info["target"] == 7 and info["gamma_used"] == 10.0 and info["variant"]["name"] == "standard"
    with pytest.raises(ValueError, match="no backdoor record"):
        recover_attack(random_cnn)


# ---------------------------------------------------------------------------
# census


def test_census(small_fcn, small_data):
    _, test = small_data
    res = inject(small_fcn, AttackConfig())
    c = activation_census(res.model, res.path, test, res.trigger)
    assert c.clean == 0 and c.backdoored == len(test) == c.total
    empty = activation_census(res.model, res.path, test.head(0), res.trigger)
    assert (empty.clean, empty.backdoored, empty.total) == (0, 0, 0)


def test_standard_attack_succeeds(small_fcn, small_data):
    _, test = small_data
    res = inject(small_fcn, AttackConfig())
    assert metric_asr(res.model, test, res.trigger, 0) == 1.0
    assert metric_accuracy(res.model, test) >= metric_accuracy(small_fcn, test) - 0.03


# ---------------------------------------------------------------------------
# variants


def test_fineprune_evasion_rejects_zero_sigma(small_fcn):
    with pytest.raises(ValueError, match="sigma"):
        inject(small_fcn, AttackConfig(variant=FinePruneEvasion(sigma=0.0)))


def test_fineprune_evasion_cnn(small_cnn, small_data):
    _, test = small_data
    res = inject(small_cnn, AttackConfig(variant=FinePruneEvasion()))
    assert res.gamma == 1.0
    s = res.path.switch
    # only the trigger-reading switch weights move; the bias stays
    assert res.model.layers[0].b[s.unit] == small_cnn.layers[0].b[s.unit]
    assert np.count_nonzero(res.model.layers[0].W[s.unit] != small_cnn.layers[0].W[s.unit]) == 16
    clean = np.maximum(switch_preactivation(res.model, res.path, test.images), 0)
    bd = np.maximum(switch_preactivation(res.model, res.path, apply_trigger(test.images, res.trigger)), 0)
    assert bd.mean() > 10 * clean.mean()
    assert metric_asr(res.model, test, res.trigger, 0) == 1.0


def test_lipschitz_evasion_guards(small_fcn, random_cnn):
    with pytest.warns(UserWarning, match="gamma_mid"):
        res = inject(random_cnn, AttackConfig(variant=LipschitzEvasion(gamma_mid=1e6)))
    assert all(g < 1e6 for g in res.gamma[:-1])
    with pytest.warns(UserWarning, match="out_gain"):
        inject(random_cnn, AttackConfig(variant=LipschitzEvasion(out_gain=1e-3)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = inject(small_fcn, AttackConfig(variant=LipschitzEvasion()))
    assert count_positions(changed_positions(small_fcn, res.model)) == res.param_changes


def test_obfuscation_zero_sigma_is_identity(small_fcn):
    res = inject(small_fcn, AttackConfig())
    same = obfuscate_zero_weights(res.model, res.path, 0.0)
    assert serialize(same) == serialize(res.model)
    with pytest.raises(ValueError):
        obfuscate_zero_weights(res.model, res.path, -1.0)


@pytest.mark.parametrize("which", ["fcn", "cnn"])
def test_obfuscation_leaves_no_surgical_zeros(which, small_fcn, small_cnn, small_data):
    model = small_fcn if which == "fcn" else small_cnn
    _, test = small_data
    res = inject(model, AttackConfig(variant=ZeroWeightObfuscation()))
    for ref in res.path.neurons:
        assert np.count_nonzero(res.model.layers[ref.layer_index].W[ref.unit] == 0) == 0
    assert metric_asr(res.model, test, res.trigger, 0) == 1.0


def test_switch_weights_follow_trigger_order(random_cnn):
    trig = make_trigger((1, 28, 28))
    path = select_path(random_cnn, trig.mask)
    w = switch_weights(random_cnn, path, trig)
    kernel = random_cnn.layers[0].W[path.switch.unit, 0]
    assert np.array_equal(w, kernel[1:, 1:].reshape(-1))


def test_untrained_surgery_stays_inside_touched_set(random_cnn):
    # zero-initialised biases already hold the amplifier bias 0, so fewer entries differ
    res = inject(random_cnn, AttackConfig(seed=4))
    changed = changed_positions(random_cnn, res.model)
    for k, (w, b) in changed.items():
        assert set(w) <= set(res.touched[k][0]) and set(b) <= set(res.touched[k][1])
    assert count_positions(changed) == res.param_changes - len(res.path.amplifiers)
