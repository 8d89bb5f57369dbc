"""Entropy detector and the planted-primitive fixtures."""

import numpy as np
import pytest

from gradleak.detection import (DetectionError, make_identity_kernel,
                                make_rtf_module, make_zero_kernel,
                                normalized_entropy, plant_identity_kernels,
                                scan_model, structural_checksum)
from gradleak.models import (FeatureExtractor, SpabHead,
                             default_extractor_spec)


def test_entropy_of_constant_vector_is_zero():
    assert normalized_entropy(np.full(100, 0.123456)) == pytest.approx(0.0)


def test_entropy_of_spread_vector_is_high():
    w = np.random.default_rng(0).normal(0.0, 0.1, 1000)
    assert normalized_entropy(w) > 0.9


def test_entropy_two_balanced_bins():
    # half at 0, half at 1 over n=4: H = log2 / log4 = 0.5
    w = np.array([0.0, 0.0, 1.0, 1.0]) + 0.5e-6
    assert normalized_entropy(w) == pytest.approx(0.5)


def test_entropy_singleton_defined_as_one():
    assert normalized_entropy(np.array([3.0])) == 1.0


def test_entropy_handles_negative_weights():
    w = np.array([-1.0, -1.0, -1.0, -1.0])
    assert normalized_entropy(w) == pytest.approx(0.0)


def test_bad_bin_width():
    with pytest.raises(DetectionError):
        normalized_entropy(np.zeros(4), bin_width=0.0)


def _clean_fe(seed=0):
    return FeatureExtractor(default_extractor_spec(16, ir_dim=32),
                            rng=np.random.default_rng(seed))


def test_clean_random_model_not_flagged():
    scan = scan_model(_clean_fe())
    assert not scan.anomalous
    assert scan.min_entropy > 0.8


def test_identity_kernels_flagged():
    fe = plant_identity_kernels(_clean_fe(1))
    scan = scan_model(fe)
    assert scan.anomalous
    assert scan.min_entropy < 0.5


def test_zero_kernel_flagged():
    fe = _clean_fe(2)
    for i, layer in enumerate(fe.spec.layers):
        if layer[0] == "conv":
            fe.params[f"conv{i}.w"].data[0] = make_zero_kernel(1, layer[1], layer[3])[0]
            break
    assert scan_model(fe).anomalous


def test_rtf_module_flagged():
    head = make_rtf_module(32, 16)
    scan = scan_model(head)
    assert scan.anomalous
    assert scan.min_entropy < 0.1


def test_clean_spab_head_not_flagged():
    head = SpabHead(32, 32, 4, rng=np.random.default_rng(3))
    assert not scan_model(head).anomalous


def test_identity_kernel_shape():
    w = make_identity_kernel(3, 3)
    assert w.shape == (3, 3, 3, 3)
    np.testing.assert_array_equal(w.sum(axis=(2, 3)), np.eye(3))
    with pytest.raises(DetectionError):
        make_identity_kernel(3, 2)


def test_structural_checksum_is_order_sensitive():
    a = structural_checksum("fe:3x16x16|conv,relu")
    b = structural_checksum("fe:3x16x16|relu,conv")
    assert a != b and a == structural_checksum("fe:3x16x16|conv,relu")
    assert 0 <= a < 2 ** 64
