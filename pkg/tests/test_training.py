import numpy as np
import pytest

from shapebias.attacks import AttackConfig
from shapebias.data import NO_AUGMENTATION, LabeledDataset, make_synthetic_corpus
from shapebias.errors import ConfigurationError, TrainingDivergence
from shapebias.model import MLPConfig, build_network
from shapebias.training import (
    TrainConfig,
    TrainLog,
    adversary_at,
    clip_gradients,
    evaluate_accuracy,
    sgd_step,
    split_validation,
    train,
)


def _tiny(n=40, seed=0):
    ds = make_synthetic_corpus(n, seed=seed, size=8)
    return ds


def _cfg(**kw):
    base = dict(epochs=1, batch_size=16, learning_rate=0.05, momentum=0.9, weight_decay=0.0,
                augmentation=NO_AUGMENTATION, val_fraction=0.0, schedule="constant")
    base.update(kw)
    return TrainConfig(**base)


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    new, state = sgd_step(p, g, lr=0.1, momentum=0.0, weight_decay=0.0, state={})
    np.testing.assert_array_equal(new["w"], [0.95, -2.025])


def test_sgd_momentum_two_steps():
    p = {"w": np.array([0.0])}
    g = {"w": np.array([2.0])}
    p1, s = sgd_step(p, g, 0.1, 0.9, 0.0, {})
    p2, s = sgd_step(p1, g, 0.1, 0.9, 0.0, s)
    # displacement lr * g * (1 + 1.9)
    assert p2["w"][0] == pytest.approx(-0.1 * 2.0 * 2.9, abs=1e-15)


def test_weight_decay_is_gradient_shift():
    p = {"w": np.array([3.0, -1.0])}
    g = {"w": np.array([0.2, 0.4])}
    a, _ = sgd_step(p, g, 0.1, 0.0, 0.01, {})
    b, _ = sgd_step(p, {"w": g["w"] + 0.01 * p["w"]}, 0.1, 0.0, 0.0, {})
    np.testing.assert_array_equal(a["w"], b["w"])


def test_clip_gradients_joint_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out = clip_gradients(g, 1.0)
    np.testing.assert_allclose([out["a"][0], out["b"][0]], [0.6, 0.8], rtol=1e-15)
    assert clip_gradients(g, 10.0) is g


def test_zero_learning_rate_keeps_parameters():
    ds = _tiny()
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(6,), seed=1))
    out, _ = train(net, ds, _cfg(epochs=2, learning_rate=0.0))
    for name, t in net.parameters.items():
        assert np.array_equal(out.parameters[name].data, t.data)


def test_single_step_matches_softmax_regression_oracle():
    ds = _tiny(24)
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(), seed=3))
    out, _ = train(net, ds, _cfg(batch_size=24, momentum=0.0, learning_rate=0.3))
    x = ds.batch().reshape(24, -1)
    w, b = net.parameters["head.weight"].data, net.parameters["head.bias"].data
    z = x @ w + b
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    resid = (p - np.eye(10)[ds.labels]) / 24
    assert np.max(np.abs(out.parameters["head.weight"].data - (w - 0.3 * x.T @ resid))) < 1e-12
    assert np.max(np.abs(out.parameters["head.bias"].data - (b - 0.3 * resid.sum(axis=0)))) < 1e-12


def test_same_seed_same_parameters():
    ds = _tiny()
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(8,), seed=0))
    a, log_a = train(net, ds, _cfg(epochs=2, seed=5))
    b, log_b = train(net, ds, _cfg(epochs=2, seed=5))
    for name in net.parameters:
        assert np.array_equal(a.parameters[name].data, b.parameters[name].data)
    assert [r["loss"] for r in log_a.records] == [r["loss"] for r in log_b.records]


def test_zero_budget_adversary_matches_standard_training():
    ds = _tiny()
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(8,), seed=0))
    std, _ = train(net, ds, _cfg(epochs=2, seed=1))
    adv = AttackConfig("linf", 0.0, 0.01, 3, random_start=True, seed=2)
    at, _ = train(net, ds, _cfg(epochs=2, seed=1, adversary=adv))
    for name in net.parameters:
        assert np.array_equal(std.parameters[name].data, at.parameters[name].data)


def test_adversarial_training_runs_with_fgsm_and_l2():
    ds = _tiny(20)
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(4,), seed=0))
    for adv in (AttackConfig.fgsm(8 / 255), AttackConfig("l2", 0.5, 0.1, 2)):
        _, log = train(net, ds, _cfg(adversary=adv))
        assert len(log) == 1


def test_underfit_stops_at_first_epoch_reaching_target():
    ds = _tiny(60, seed=2)
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(16,), seed=0))
    full_cfg = _cfg(epochs=12, val_fraction=0.25, learning_rate=0.1, seed=3)
    _, full = train(net, ds, full_cfg)
    vals = [r["val_acc"] for r in full.records]
    target = sorted(set(vals))[len(set(vals)) // 2]
    stop = vals.index(next(v for v in vals if v >= target))
    _, log = train(net, ds, _cfg(epochs=12, val_fraction=0.25, learning_rate=0.1, seed=3,
                                 underfit_target_accuracy=target))
    assert len(log) == stop + 1
    assert log.records[-1]["val_acc"] >= target
    assert all(r["val_acc"] < target for r in log.records[:-1])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch_and_batch():
    ds = _tiny()
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(8,), seed=0))
    with pytest.raises(TrainingDivergence, match=r"epoch \d+, batch \d+"):
        train(net, ds, _cfg(epochs=3, learning_rate=1e200, momentum=0.0))


def test_config_modes_are_exclusive():
    with pytest.raises(ConfigurationError):
        TrainConfig(adversary=AttackConfig(), underfit_target_accuracy=0.5)
    assert TrainConfig().mode == "standard"
    assert TrainConfig(adversary=AttackConfig()).mode == "adversarial"
    assert TrainConfig(underfit_target_accuracy=0.5).mode == "underfit"


def test_evaluate_accuracy_against_loop():
    class Constant:
        class_count = 10

        def __call__(self, x):
            from shapebias import autodiff as ad

            logits = np.zeros((x.shape[0], 10))
            logits[:, 3] = 1.0
            return ad.Tensor(logits)

    ds = _tiny(50)
    assert evaluate_accuracy(Constant(), ds) == 0.1
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(5,), seed=4))
    loop = sum(int(np.argmax(net(ds.batch([i])).data) == ds.labels[i]) for i in range(len(ds))) / len(ds)
    assert evaluate_accuracy(net, ds, batch_size=7) == loop


def test_validation_split_is_the_tail():
    ds = LabeledDataset(np.zeros((10, 2, 2, 3)), np.arange(10))
    tr, val = split_validation(ds, 0.1)
    assert tr.labels.tolist() == list(range(9))
    assert val.labels.tolist() == [9]
    assert split_validation(ds, 0.0)[1] is None


def test_train_log_is_monotone_and_writes_csv(tmp_path):
    log = TrainLog()
    log.append(1, 2.0, 0.1, None, 0.5)
    with pytest.raises(ValueError):
        log.append(1, 1.0, 0.2, 0.2, 0.5)
    log.write_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines() == ["epoch,loss,train_acc,val_acc,seconds", "1,2.0,0.1,NA,0.5"]


def test_epsilon_warmup_ramps_linearly():
    adv = AttackConfig("linf", 8 / 255, 2 / 255, 3)
    cfg = TrainConfig(adversary=adv, epsilon_warmup_epochs=1)
    ramp = [adversary_at(cfg, s, steps_per_epoch=3) for s in range(5)]
    assert [a.epsilon * 255 for a in ramp[:3]] == pytest.approx([2, 4, 6], abs=1e-12)
    assert [a.step_size * 255 for a in ramp[:3]] == pytest.approx([0.5, 1, 1.5], abs=1e-12)
    assert ramp[3] is adv and ramp[4] is adv
    assert adversary_at(TrainConfig(adversary=adv), 0, 3) is adv
    assert adversary_at(TrainConfig(epsilon_warmup_epochs=2), 0, 3) is None
    fg = AttackConfig.fgsm(8 / 255)
    assert adversary_at(TrainConfig(adversary=fg, epsilon_warmup_epochs=1), 0, 3).is_fgsm
    with pytest.raises(ConfigurationError):
        TrainConfig(epsilon_warmup_epochs=-1)


def test_clean_warmup_precedes_the_ramp():
    adv = AttackConfig("l2", 0.5, 0.1, 2)
    cfg = TrainConfig(adversary=adv, clean_warmup_epochs=2, epsilon_warmup_epochs=1)
    plan = [adversary_at(cfg, s, steps_per_epoch=2) for s in range(7)]
    assert plan[:4] == [None] * 4
    assert [a.epsilon for a in plan[4:6]] == pytest.approx([0.5 / 3, 1.0 / 3], abs=1e-15)
    assert plan[6] is adv


def test_clean_warmup_epochs_match_standard_training():
    ds = _tiny()
    net = build_network(MLPConfig(input_size=(3, 8, 8), hidden=(8,), seed=0))
    std, _ = train(net, ds, _cfg(epochs=2, seed=1))
    adv = AttackConfig("linf", 8 / 255, 2 / 255, 2, seed=2)
    warm, _ = train(net, ds, _cfg(epochs=2, seed=1, adversary=adv, clean_warmup_epochs=2))
    for name in net.parameters:
        assert np.array_equal(std.parameters[name].data, warm.parameters[name].data)
