import numpy as np
import pytest

from fcmnet import tensor as T
from fcmnet.backbone import build_backbone, tiny_config
from fcmnet.blocks import MKP, MkpConfig
from fcmnet.errors import UsageError
from fcmnet.tensor import ConvSpec, Tensor4
from fcmnet.verification import (
    GRAD_TOL,
    _block_params,
    closed_form_rf,
    conv_case_matrix,
    gradcheck,
    naive_conv2d,
    projection_loss,
    receptive_field_probe,
    rel_error,
    run_blocks_suite,
    run_ops_suite,
)


@pytest.fixture
def corrupt_conv_backward(monkeypatch):
    """Scale every conv2d gradient by 1.01 to simulate a broken backward."""
    original = T._conv2d_backward

    def broken(*args):
        return tuple(None if g is None else 1.01 * g for g in original(*args))

    monkeypatch.setattr(T, "_conv2d_backward", broken)


def test_naive_conv_hand_computed():
    x = Tensor4(np.arange(9.0).reshape(1, 1, 3, 3))
    w = Tensor4(np.array([[1.0, 0.0], [0.0, -1.0]]).reshape(1, 1, 2, 2))
    y = naive_conv2d(x, ConvSpec(1, 1, 2), w).data
    # cross-correlation: x[i, j] - x[i+1, j+1] = -4 everywhere
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), -4.0))


def test_rel_error_guard():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert rel_error(2.0, 1.0) == 0.5


def test_gradcheck_quadratic_is_exact_to_rounding():
    theta = Tensor4(np.random.default_rng(0).uniform(-1, 1, size=(1, 2, 3, 3)))
    rep = gradcheck(lambda: T.sum_all(T.eltwise_mul_broadcast(theta, theta)), {"theta": theta})
    assert rep.passed and rep.max_rel_error < 1e-8 and rep.checked == 18


def test_gradcheck_reports_nonfinite():
    theta = Tensor4(np.full((1, 1, 1, 1), np.inf))
    rep = gradcheck(lambda: T.sum_all(theta), [theta])
    assert rep.nonfinite and not rep.passed


def test_gradcheck_catches_corrupted_conv_backward(corrupt_conv_backward):
    rng = np.random.default_rng(1)
    spec = ConvSpec(2, 3, 3, 1, 1)
    x = Tensor4(rng.uniform(-1, 1, size=(1, 2, 4, 4)))
    w = Tensor4(rng.uniform(-1, 1, size=spec.weight_shape))
    loss = projection_loss(0)
    rep = gradcheck(lambda: loss(T.conv2d(x, spec, w)), {"x": x, "w": w})
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-3)


def test_ops_suite_passes():
    results = run_ops_suite(seed=0)
    assert [r.name for r in results if not r.passed] == []
    assert len(results) > 15


def test_ops_suite_names_conv_when_backward_is_corrupted(corrupt_conv_backward):
    failed = [r.name for r in run_ops_suite(seed=0) if not r.passed]
    assert failed and all(name.startswith("conv2d") for name in failed)


def test_blocks_suite_passes():
    results = run_blocks_suite(seed=0)
    assert [r.line() for r in results if not r.passed] == []


def test_case_matrix_size():
    cases = conv_case_matrix()
    # groups in {1, c} collapses to a single value when c == 1
    assert len(cases) == len(set(cases)) == 2 * (1 + 2 + 2) * 9 * 3 * 2 == 540


def test_probe_rejects_support_touching_border():
    block = MKP(MkpConfig(2, (7, 7, 7)), np.random.default_rng(2)).linearize()
    with pytest.raises(UsageError):
        receptive_field_probe(block, size=15)
    assert receptive_field_probe(block, size=31).width == closed_form_rf((7, 7, 7)) == 19


def test_probe_rejects_nonlinear_callable():
    with pytest.raises(UsageError):
        receptive_field_probe(lambda t: T.sigmoid(t), size=9, in_channels=1)


def test_backbone_resolvable_gradients_agree():
    """Diagnostic companion to the end-to-end gradient acceptance check.

    Central differences at h=1e-6 resolve a gradient only down to the forward
    pass rounding noise (about 1e-9 absolute here).  Every coordinate whose
    tape gradient exceeds 1e-4 must agree to the standard tolerance, and no
    coordinate may disagree by more than 1e-8 absolute.
    """
    rng = np.random.default_rng(0)
    model = build_backbone(tiny_config(), 0)
    x = Tensor4(rng.uniform(-1, 1, size=(2, 3, 16, 16)))
    loss = projection_loss(0)
    rep = gradcheck(lambda: loss(model(x)), _block_params(model, [x]), record=True)
    big = [(n, i, a, b) for n, i, a, b in rep.records if abs(a) > 1e-4]
    assert len(big) > len(rep.records) // 2
    assert max(rel_error(a, b) for _, _, a, b in big) < GRAD_TOL
    assert max(abs(a - b) for _, _, a, b in rep.records) < 1e-8
