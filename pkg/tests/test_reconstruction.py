"""IR-matching inversion, preimage collisions, and PPM output."""

import numpy as np
import pytest

from gradleak import tensor as T
from gradleak.data import synth_dataset
from gradleak.models import FeatureExtractor, Generator, default_extractor_spec
from gradleak.reconstruction import (IrMatchConfig, ir_distance, ir_match,
                                     preimage_attack, read_ppm,
                                     run_ir_match_jobs, write_ppm)
from gradleak.tensor import Tensor
from gradleak.training import PgdBudget


@pytest.fixture(scope="module")
def small_fe():
    fe = FeatureExtractor(default_extractor_spec(16, ir_dim=32),
                          rng=np.random.default_rng(0))
    return fe


def test_ir_distance_zero_at_target():
    target = np.array([0.5, -1.0, 2.0])
    d = ir_distance(Tensor(target.copy()), target, alpha=0.5)
    assert d.item() == pytest.approx(0.0, abs=1e-12)


def test_ir_distance_oracle_value():
    y = np.array([1.0, 0.0])
    tgt = np.array([0.0, 1.0])
    py = np.exp(y) / np.exp(y).sum()
    pt = np.exp(tgt) / np.exp(tgt).sum()
    kl = float((pt * (np.log(pt) - np.log(py))).sum())
    mse = float(((y - tgt) ** 2).mean())
    got = ir_distance(Tensor(y), tgt, alpha=0.3).item()
    assert got == pytest.approx(0.3 * kl + 0.7 * mse)


def test_ir_distance_alpha_extremes():
    y, tgt = np.array([1.0, 2.0]), np.array([2.0, 1.0])
    mse_only = ir_distance(Tensor(y), tgt, alpha=0.0).item()
    assert mse_only == pytest.approx(((y - tgt) ** 2).mean())
    kl_only = ir_distance(Tensor(y), tgt, alpha=1.0).item()
    assert kl_only > 0


def test_ir_match_config_validation():
    with pytest.raises(ValueError):
        IrMatchConfig(perturb_every=0)
    with pytest.raises(ValueError):
        IrMatchConfig(alpha=1.5)


def test_ir_match_deterministic(small_fe):
    target = np.random.default_rng(1).normal(size=32)
    cfg = IrMatchConfig(iterations=30, perturb_every=10, seed=3)
    gen = Generator((3, 16, 16), rng=np.random.default_rng(2))
    a = ir_match(target, small_fe, gen, cfg)
    b = ir_match(target, small_fe, gen, cfg)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.best_loss == b.best_loss and a.best_iteration == b.best_iteration


def test_ir_match_does_not_mutate_generator(small_fe):
    gen = Generator((3, 16, 16), rng=np.random.default_rng(4))
    before = {k: p.data.copy() for k, p in gen.params.items()}
    ir_match(np.zeros(32), small_fe, gen,
             IrMatchConfig(iterations=10, perturb_every=5))
    for k in before:
        np.testing.assert_array_equal(gen.params[k].data, before[k])


def test_ir_match_reduces_loss(small_fe):
    ds = synth_dataset(5, 4, 4, size=16)
    target = small_fe.forward(Tensor(ds.images[:1])).data[0]
    cfg = IrMatchConfig(iterations=150, perturb_every=60, seed=0)
    gen = Generator((3, 16, 16), rng=np.random.default_rng(5))
    res = ir_match(target, small_fe, gen, cfg)
    assert res.best_loss < res.loss_trace[0]
    assert res.best_loss == min(res.loss_trace)


def test_huge_tv_weight_flattens_output(small_fe):
    cfg = IrMatchConfig(iterations=150, perturb_every=75, tv_weight=1e6, seed=0)
    gen = Generator((3, 16, 16), rng=np.random.default_rng(6))
    res = ir_match(np.zeros(32), small_fe, gen, cfg)
    assert T.tv_norm(Tensor(res.image)).item() < 1e-2


def test_jobs_results_independent_of_worker_count(small_fe, tmp_path):
    fe_path = tmp_path / "fe.ckpt"
    small_fe.save(fe_path)
    rng = np.random.default_rng(7)
    targets = [rng.normal(size=32) for _ in range(3)]
    cfg = IrMatchConfig(iterations=20, perturb_every=10, seed=5)
    seq = run_ir_match_jobs(targets, str(fe_path), (3, 16, 16), cfg, jobs=1)
    par = run_ir_match_jobs(targets, str(fe_path), (3, 16, 16), cfg, jobs=2)
    for a, b in zip(seq, par):
        np.testing.assert_array_equal(a.image, b.image)


def test_preimage_attack_reduces_distance(small_fe):
    ds = synth_dataset(8, 8, 4, size=16)
    res = preimage_attack(ds.images[0], ds.images[1], small_fe,
                          PgdBudget(1.0, 0.01, 60))
    assert res.trace[-1] < res.trace[0]
    assert res.ratio == pytest.approx(res.trace[-1] / res.trace[0])
    assert res.image.min() >= 0.0 and res.image.max() <= 1.0


def test_preimage_zero_budget_is_noop(small_fe):
    ds = synth_dataset(9, 4, 4, size=16)
    res = preimage_attack(ds.images[0], ds.images[1], small_fe,
                          PgdBudget(0.0, 1e-9, 1))
    np.testing.assert_array_equal(res.image, ds.images[1])


def test_ppm_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(3, 8, 10)) * 255) / 255
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    blob = path.read_bytes()
    assert blob.startswith(b"P6\n10 8\n255\n")
    np.testing.assert_allclose(read_ppm(path), img, atol=1e-12)


def test_ppm_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((1, 8, 8)))
