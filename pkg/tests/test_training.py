"""PGD attack, adversarial training, and SpAB head training."""

import numpy as np
import pytest

from gradleak import tensor as T
from gradleak.data import synth_dataset
from gradleak.models import (FeatureExtractor, LinearHead, SpabHead,
                             default_extractor_spec)
from gradleak.tensor import Tensor
from gradleak.training import (PgdBudget, SpabTrainConfig, accuracy,
                               adversarial_train, alpha_schedule, pgd_attack,
                               probe_leakage_rate, spab_train, sparsity_loss)


@pytest.fixture(scope="module")
def tiny_setup():
    ds = synth_dataset(0, 64, 4, size=16)
    fe = FeatureExtractor(default_extractor_spec(16, ir_dim=32),
                          rng=np.random.default_rng(0))
    head = LinearHead(32, 4, rng=np.random.default_rng(1))
    return ds, fe, head


def test_pgd_budget_validation():
    with pytest.raises(ValueError):
        PgdBudget(-0.1, 0.01, 5)
    with pytest.raises(ValueError):
        PgdBudget(0.1, 0.2, 5)  # step exceeds radius
    with pytest.raises(ValueError):
        PgdBudget(0.1, 0.01, 0)


def test_pgd_zero_epsilon_is_identity(tiny_setup):
    ds, fe, head = tiny_setup
    x = ds.images[:4]
    adv = pgd_attack(fe, head, x, ds.labels[:4], PgdBudget(0.0, 1e-9, 1))
    np.testing.assert_array_equal(adv, x)
    assert adv is not x  # a copy, inputs never aliased


def test_pgd_stays_in_ball_and_range(tiny_setup):
    ds, fe, head = tiny_setup
    x = ds.images[:8]
    eps = 8 / 255
    adv = pgd_attack(fe, head, x, ds.labels[:8], PgdBudget(eps, 2 / 255, 5))
    assert np.max(np.abs(adv - x)) <= eps + 1e-12
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_pgd_increases_loss(tiny_setup):
    ds, fe, head = tiny_setup
    x, c = ds.images[:16], ds.labels[:16]
    adv = pgd_attack(fe, head, x, c, PgdBudget(8 / 255, 2 / 255, 5))

    def ce(batch):
        return T.cross_entropy(head.forward(fe.forward(Tensor(batch))), c).item()

    assert ce(adv) >= ce(x)


def test_pgd_leaves_no_parameter_grads(tiny_setup):
    ds, fe, head = tiny_setup
    pgd_attack(fe, head, ds.images[:4], ds.labels[:4], PgdBudget(4 / 255, 1 / 255, 3))
    assert all(p.grad is None for p in fe.params.values())
    assert all(p.grad is None for p in head.params.values())


def test_adversarial_train_learns():
    ds = synth_dataset(1, 128, 4, size=16)
    fe = FeatureExtractor(default_extractor_spec(16, ir_dim=32),
                          rng=np.random.default_rng(2))
    head = LinearHead(32, 4, rng=np.random.default_rng(3))
    hist = adversarial_train(fe, head, ds, PgdBudget(0.0, 1e-9, 1),
                             epochs=6, lr=0.05, batch_size=32, seed=0)
    assert len(hist.epochs) == 6
    assert hist.epochs[-1]["natural_acc"] > hist.epochs[0]["natural_acc"]
    assert hist.epochs[-1]["natural_acc"] > 0.5


def test_alpha_schedule_endpoints():
    k_total = 40
    assert alpha_schedule(1, k_total) < 0.01
    assert alpha_schedule(k_total, k_total) == pytest.approx(1.0)
    vals = [alpha_schedule(k, k_total) for k in range(1, k_total + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_alpha_schedule_bounds():
    with pytest.raises(ValueError):
        alpha_schedule(0, 10)
    with pytest.raises(ValueError):
        alpha_schedule(11, 10)


def test_sparsity_loss_oracle():
    z = Tensor(np.array([[1.0, -2.0], [3.0, 0.5]]))
    zp = T.relu(z)
    b, n = 2, 2
    expected = (1.0 / n) * np.maximum(z.data, 0).sum() + \
        (2.0 / (b * n)) * np.logaddexp(0.0, -z.data).sum()
    assert sparsity_loss(z, zp, 1.0, 2.0).item() == pytest.approx(expected)


def test_spab_train_freezes_extractor():
    ds = synth_dataset(2, 96, 4, size=16)
    fe = FeatureExtractor(default_extractor_spec(16, ir_dim=32),
                          rng=np.random.default_rng(4))
    before = fe.state()
    head = SpabHead(32, 32, 4, rng=np.random.default_rng(5))
    cfg = SpabTrainConfig(epochs=3, batches_per_epoch=2, batch_size=16)
    hist = spab_train(fe, head, ds, cfg, seed=0)
    for name, arr in before.items():
        np.testing.assert_array_equal(fe.params[name].data, arr)
    assert all(p.requires_grad for p in fe.params.values())
    assert len(hist.epochs) == 3


def test_spab_train_probe_trace():
    ds = synth_dataset(3, 96, 4, size=16)
    fe = FeatureExtractor(default_extractor_spec(16, ir_dim=32),
                          rng=np.random.default_rng(6))
    head = SpabHead(32, 32, 4, rng=np.random.default_rng(7))
    probe = (ds.images[:8], ds.labels[:8])
    cfg = SpabTrainConfig(epochs=2, batches_per_epoch=2, batch_size=16)
    hist = spab_train(fe, head, ds, cfg, probe=probe, seed=0)
    assert all("leakage_rate" in e for e in hist.epochs)
    assert all(0.0 <= e["leakage_rate"] <= 1.0 for e in hist.epochs)


def test_probe_leakage_rate_range(tiny_setup):
    ds, fe, _ = tiny_setup
    head = SpabHead(32, 32, 4, rng=np.random.default_rng(8))
    rate = probe_leakage_rate(fe, head, ds.images[:8], ds.labels[:8])
    assert 0.0 <= rate <= 1.0


def test_accuracy_simple(tiny_setup):
    ds, fe, head = tiny_setup
    acc = accuracy(fe, head, ds.images, ds.labels)
    assert 0.0 <= acc <= 1.0
