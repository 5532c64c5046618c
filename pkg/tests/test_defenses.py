import numpy as np
import pytest

from backdoor_lab.attack import (AttackConfig, FinePruneEvasion, LipschitzEvasion, build_pruned, inject,
                                 output_column)
from backdoor_lab.container import serialize
from backdoor_lab.data import Dataset, apply_trigger
from backdoor_lab.defenses import (DefenseReport, activation_anomaly_scan, anomaly_index, defense_fine_prune,
                                   defense_fine_tune, defense_lipschitz_prune, fine_prune_sweep, mean_activations,
                                   oracle_gradient_consistency, oracle_output_consistency, prune_count,
                                   reverse_engineer_trigger, zero_weight_scan)
from backdoor_lab.metrics import AttackProbe
from backdoor_lab.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def fcn_attack(small_fcn):
    return inject(small_fcn, AttackConfig())


@pytest.fixture(scope="module")
def cnn_attack(small_cnn):
    return inject(small_cnn, AttackConfig())


def probe_for(res, small_data):
    return AttackProbe(small_data[1], res.trigger, 0)


# ---------------------------------------------------------------------------
# anomaly index


def test_anomaly_index_equal_norms():
    idx, detected = anomaly_index([3.0] * 10)
    assert np.all(idx == 0) and not detected


def test_anomaly_index_single_small_norm():
    idx, detected = anomaly_index([1.0] + [10.0] * 9)
    assert idx[0] > 2 and detected and np.all(idx[1:] == 0)


def test_anomaly_index_hand_computed():
    # median 10; absolute deviations 8,1,0,0,1,2,2,0,1,1 -> MAD = 1 -> scale 1.4826
    idx, detected = anomaly_index([2, 9, 10, 10, 11, 12, 8, 10, 9, 11])
    assert idx[0] == pytest.approx(8 / 1.4826)
    assert idx[5] == pytest.approx(2 / 1.4826)
    assert detected


def test_anomaly_index_scale_invariant(rng):
    n = rng.random(10) * 50
    for k in (0.001, 3.0, 1e4):
        assert np.allclose(anomaly_index(n * k)[0], anomaly_index(n)[0])


def test_anomaly_index_large_outlier_is_not_detection():
    # only an unusually *small* trigger counts as a detection
    assert not anomaly_index([50.0] + [10, 11, 9, 10, 10, 11, 9, 10, 12])[1]


# ---------------------------------------------------------------------------
# fine-pruning


def test_prune_count():
    assert prune_count(0.3, 10) == 3
    assert prune_count(0.0, 32) == 0
    assert prune_count(1 / 32, 32) == 1
    assert prune_count(0.05, 32) == 2
    assert prune_count(1.0, 32) == 32
    with pytest.raises(ValueError):
        prune_count(1.5, 10)


def test_fine_prune_zero_fraction_is_identity(small_fcn, small_data):
    rep = defense_fine_prune(small_fcn, small_data[0], 0.0)
    assert rep.metrics["pruned_units"] == []
    assert serialize(rep.model) == serialize(small_fcn)


def test_fine_prune_removes_lowest_activation_prefix(small_fcn, small_data):
    rep = defense_fine_prune(small_fcn, small_data[0], 0.25)
    means = np.array(rep.metrics["mean_activation"])
    pruned = rep.metrics["pruned_units"]
    assert len(pruned) == 8
    kept = np.setdiff1d(np.arange(32), pruned)
    assert means[pruned].max() <= means[kept].min()
    for u in pruned:
        assert not rep.model.layers[1].W[u].any() and rep.model.layers[3].W[:, u].sum() == 0


def test_standard_switch_is_pruned_first(fcn_attack, small_data):
    train_ds, _ = small_data
    means = mean_activations(fcn_attack.model, train_ds, 1)
    assert means[fcn_attack.path.switch.unit] == 0
    sweep = fine_prune_sweep(fcn_attack.model, train_ds, probe_for(fcn_attack, small_data))
    assert sweep.metrics["order"][0] == fcn_attack.path.switch.unit
    assert sweep.metrics["curve"][1]["asr"] < 0.2
    assert sweep.verdict == "backdoor removed"


def test_fineprune_variant_survives_the_sweep(small_fcn, small_data):
    res = inject(small_fcn, AttackConfig(variant=FinePruneEvasion()))
    sweep = fine_prune_sweep(res.model, small_data[0], probe_for(res, small_data))
    assert sweep.metrics["min_asr_within_budget"] == 1.0
    assert sweep.metrics["max_pruned_within_budget"] > 0


def test_fine_prune_then_finetune_keeps_units_dead(small_fcn, small_data):
    rep = defense_fine_prune(small_fcn, small_data[0], 0.1, then_finetune=TrainConfig(epochs=1, learning_rate=0.01))
    for u in rep.metrics["pruned_units"]:
        assert not rep.model.layers[1].W[u].any() and not rep.model.layers[3].W[:, u].any()


# ---------------------------------------------------------------------------
# Lipschitz pruning


def test_lipschitz_prune_huge_u_is_identity(small_cnn):
    rep = defense_lipschitz_prune(small_cnn, 1e9)
    assert rep.metrics["pruned_total"] == 0
    assert serialize(rep.model) == serialize(small_cnn)


def test_lipschitz_prune_never_touches_output_layer(small_cnn):
    rep = defense_lipschitz_prune(small_cnn, 0.0)
    assert str(len(small_cnn.layers) - 1) not in rep.metrics["layers"]
    assert np.array_equal(rep.model.layers[-1].b, small_cnn.layers[-1].b)


def test_standard_amplifiers_are_lipschitz_outliers(cnn_attack, small_data):
    rep = defense_lipschitz_prune(cnn_attack.model, 1.0, probe_for(cnn_attack, small_data))
    amp = cnn_attack.path.neurons[1]
    assert amp.unit in rep.metrics["layers"][str(amp.layer_index)]["pruned"]
    assert rep.metrics["asr_after"] < 0.5


@pytest.mark.parametrize("u", [0.5, 1.0, 2.0, 3.0])
def test_lipschitz_variant_survives(u, small_cnn, small_data):
    res = inject(small_cnn, AttackConfig(variant=LipschitzEvasion()))
    rep = defense_lipschitz_prune(res.model, u, probe_for(res, small_data))
    for ref in res.path.neurons:
        assert ref.unit not in rep.metrics["layers"][str(ref.layer_index)]["pruned"]
    assert rep.metrics["asr_after"] == 1.0


# ---------------------------------------------------------------------------
# fine-tuning


def test_fine_tune_leaves_the_path_alone(fcn_attack, small_data):
    rep = defense_fine_tune(fcn_attack.model, small_data[0], epochs=2, probe=probe_for(fcn_attack, small_data),
                            path=fcn_attack.path.neurons)
    assert rep.metrics["path_param_delta"] == 0.0
    assert rep.metrics["max_param_delta"] > 0
    assert [p["asr"] for p in rep.metrics["per_epoch"]] == [1.0, 1.0]
    assert rep.verdict == "backdoor survives"


def test_path_gradients_vanish_on_every_clean_batch(cnn_attack, small_data):
    path = cnn_attack.path
    col = output_column(cnn_attack.model, path)

    def hook(epoch, step, grads, model):
        for ref in path.neurons:
            dW, db = grads.params[ref.layer_index]
            assert not dW[ref.unit].any() and db[ref.unit] == 0
        assert not grads.params[len(model.layers) - 1][0][:, col].any()

    train(cnn_attack.model, small_data[0].head(256), TrainConfig(epochs=1, learning_rate=0.01), on_batch=hook)


def test_fine_tune_on_activating_data_moves_the_path(fcn_attack, small_data):
    train_ds, _ = small_data
    x = apply_trigger(train_ds.images[:200], fcn_attack.trigger)
    labels = np.where(train_ds.labels[:200] == 0, 1, train_ds.labels[:200])
    poisoned = Dataset(x, labels)
    rep = defense_fine_tune(fcn_attack.model, poisoned, epochs=1, path=fcn_attack.path.neurons)
    assert rep.metrics["path_param_delta"] > 0


def test_report_json_roundtrip(fcn_attack, small_data, tmp_path):
    rep = defense_lipschitz_prune(fcn_attack.model, 1.0, probe_for(fcn_attack, small_data))
    rep.write(tmp_path / "r.json")
    back = DefenseReport.read(tmp_path / "r.json")
    assert back.defense == "lipschitz-prune" and back.params == {"u": 1.0}
    assert back.verdict == rep.verdict and back.metrics["asr_after"] == rep.metrics["asr_after"]


# ---------------------------------------------------------------------------
# oracles


@pytest.mark.parametrize("which", ["fcn", "cnn"])
def test_oracles_pass_on_clean_data_and_fail_on_triggered(which, fcn_attack, cnn_attack, small_data):
    res = fcn_attack if which == "fcn" else cnn_attack
    test = small_data[1].head(120)
    pruned = build_pruned(res.model, res.path)
    out = oracle_output_consistency(res.model, pruned, test, res.path)
    grad = oracle_gradient_consistency(res.model, pruned, test.head(40), res.path)
    assert out.ok and out.activating == 0 and out.max_deviation == 0
    assert grad.ok and grad.checked == 40
    bad = Dataset(apply_trigger(test.images, res.trigger), test.labels)
    out = oracle_output_consistency(res.model, pruned, bad, res.path)
    grad = oracle_gradient_consistency(res.model, pruned, bad.head(20), res.path)
    assert not out.ok and out.activating == len(bad) and out.max_deviation > 0
    assert out.ok_inactive  # vacuously: every input fires
    assert not grad.ok and grad.mismatches > 0


def test_oracle_reads_the_path_from_metadata(fcn_attack, small_data):
    pruned = build_pruned(fcn_attack.model, fcn_attack.path)
    assert oracle_output_consistency(fcn_attack.model, pruned, small_data[1]).ok


# ---------------------------------------------------------------------------
# trigger reverse-engineering and scans


def test_reverse_engineered_trigger_respects_bounds(small_fcn, small_data):
    r = reverse_engineer_trigger(small_fcn, small_data[0], 3, steps=20, batch_size=32)
    assert r.mask.shape == (28, 28) and r.pattern.shape == (1, 28, 28)
    assert r.mask.min() >= 0 and r.mask.max() <= 1
    assert r.pattern.min() >= 0 and r.pattern.max() <= 1
    assert r.l1 == pytest.approx(r.mask.sum())
    with pytest.raises(ValueError):
        reverse_engineer_trigger(small_fcn, small_data[0], 10, steps=1)


def test_scan_flags_standard_switch_not_fineprune_switch(small_fcn, fcn_attack, small_data):
    train_ds, _ = small_data
    assert fcn_attack.path.switch.unit in activation_anomaly_scan(fcn_attack.model, train_ds)
    res = inject(small_fcn, AttackConfig(variant=FinePruneEvasion()))
    assert res.path.switch.unit not in activation_anomaly_scan(res.model, train_ds)


def test_zero_weight_scan(fcn_attack, small_fcn):
    hits = zero_weight_scan(fcn_attack.model)
    assert (1, fcn_attack.path.switch.unit, pytest.approx(768 / 784)) in hits
    assert zero_weight_scan(small_fcn) == []
