#!/usr/bin/env python3
"""
Tests for the reverse-mode engine: tape bookkeeping, op values and gradients
"""

import sys
from pathlib import Path

import numpy as np

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))

import tensor_autodiff as ad
from deblur_errors import ContractViolation, DimensionError
from tensor_autodiff import ParamStore, Tape, Tensor
from verification import conv_oracle


def test_untracked_ops_build_no_tape():
    a = Tensor(np.ones((2, 2)))
    out = ad.square(a) + a
    assert not out.tracked
    np.testing.assert_allclose(out.data, 2.0)


def test_backward_square_sum():
    tape = Tape()
    x = tape.variable(np.array([1.0, -2.0, 3.0]))
    loss = ad.sum_all(ad.square(x))
    tape.backward(loss)
    np.testing.assert_allclose(tape.gradient(x), [2.0, -4.0, 6.0])


def test_fan_out_accumulates():
    tape = Tape()
    x = tape.variable(np.array([0.5, 2.0]))
    loss = ad.sum_all(ad.mul(x, x) + x)
    tape.backward(loss)
    np.testing.assert_allclose(tape.gradient(x), [2.0, 5.0])


def test_watched_store_receives_grads():
    store = ParamStore(np.float64)
    store.add('w', [1.0, 2.0])
    store.add('unused', [3.0])
    tape = Tape()
    bound = tape.watch(store)
    ad.backward(tape, ad.sum_all(ad.scale(bound['w'], 3.0)))
    np.testing.assert_allclose(store.grads['w'], [3.0, 3.0])
    np.testing.assert_allclose(store.grads['unused'], [0.0])


def test_param_store_contracts():
    store = ParamStore(np.float32)
    store.add('b', np.zeros(3))
    assert store['b'].dtype == np.float32
    assert store.num_parameters() == 3
    try:
        store.add('b', np.zeros(3))
        raise AssertionError("duplicate name accepted")
    except ContractViolation:
        pass
    try:
        store['b'] = np.zeros(4)
        raise AssertionError("shape change accepted")
    except DimensionError:
        pass
    double = store.astype(np.float64)
    assert double['b'].dtype == np.float64 and double.names() == ['b']


def test_backward_rejects_non_scalar_and_foreign_loss():
    tape = Tape()
    x = tape.variable(np.ones(3))
    try:
        tape.backward(ad.square(x))
        raise AssertionError("non-scalar loss accepted")
    except ContractViolation:
        pass
    other = Tape()
    try:
        other.backward(ad.sum_all(x))
        raise AssertionError("loss from another tape accepted")
    except ContractViolation:
        pass


def test_inputs_from_two_tapes_rejected():
    a = Tape().variable(np.ones(2))
    b = Tape().variable(np.ones(2))
    try:
        ad.add(a, b)
        raise AssertionError("mixed tapes accepted")
    except ContractViolation:
        pass


def test_conv2d_matches_oracle_with_stride():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 7, 6))
    w = rng.standard_normal((2, 3, 3, 2))
    for stride in (1, 2):
        out = ad.conv2d(Tensor(x), Tensor(w), stride=stride).data
        np.testing.assert_allclose(out, conv_oracle(x, w, stride), atol=1e-12)


def test_fft_conv_matches_direct():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 9, 8)))
    w = Tensor(rng.standard_normal((1, 2, 3, 3)))
    direct = ad.conv2d(x, w).data
    fft = ad.conv2d(x, w, method='fft').data
    np.testing.assert_allclose(fft, direct, rtol=1e-6, atol=1e-10)


def test_reflect_same_padding_keeps_size():
    x = Tensor(np.arange(30, dtype=np.float64).reshape(1, 5, 6))
    w = Tensor(np.ones((4, 1, 3, 3)))
    assert ad.conv2d(x, w, pad='reflect-same').shape == (4, 5, 6)
    assert ad.conv2d(x, w, stride=2, pad='reflect-same').shape == (4, 3, 3)


def test_pad_reflect_mirrors_without_edge_repeat():
    x = Tensor(np.array([[[0.0, 1.0, 2.0, 3.0]]]))
    out = ad.pad_reflect(x, 0, 0, 1, 2).data
    np.testing.assert_allclose(out[0, 0], [1, 0, 1, 2, 3, 2, 1])


def test_upsample_preserves_constants_and_size():
    x = Tensor(np.full((2, 3, 4), 0.7))
    out = ad.upsample_bilinear2x(x)
    assert out.shape == (2, 6, 8)
    np.testing.assert_allclose(out.data, 0.7)


def test_softmax_is_simplex_and_shift_invariant():
    logits = np.array([[1.0, 2.0], [3.0, 700.0]])
    p = ad.softmax(Tensor(logits)).data
    assert p.shape == (2, 2)
    assert abs(p.sum() - 1.0) < 1e-12 and p.min() >= 0
    q = ad.softmax(Tensor(logits - 50.0)).data
    np.testing.assert_allclose(p, q, atol=1e-15)


def test_channel_norm_standardizes():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((3, 6, 6)) * 4 + 2)
    out = ad.channel_norm(x, Tensor(np.array([1.0, 2.0, 0.5])), Tensor(np.array([0.0, 1.0, -1.0]))).data
    np.testing.assert_allclose(out.mean(axis=(1, 2)), [0.0, 1.0, -1.0], atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(1, 2)), [1.0, 2.0, 0.5], rtol=1e-4)


def test_linear_and_leaky_relu_values():
    out = ad.linear(Tensor(np.array([1.0, 2.0])), Tensor(np.array([[1.0, -1.0], [0.5, 0.5]])),
                    Tensor(np.array([0.0, 1.0])))
    np.testing.assert_allclose(out.data, [-1.0, 2.5])
    np.testing.assert_allclose(ad.leaky_relu(out, 0.2).data, [-0.2, 2.5])


def test_shape_errors():
    try:
        ad.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        raise AssertionError("channel mismatch accepted")
    except DimensionError:
        pass
    try:
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
        raise AssertionError("shape mismatch accepted")
    except DimensionError:
        pass
    try:
        ad.crop2d(Tensor(np.ones((1, 3, 3))), 1, 1, 3, 3)
        raise AssertionError("crop outside the image accepted")
    except DimensionError:
        pass


def test_gradcheck_passes_on_layers():
    rng = np.random.default_rng(3)
    cases = [
        (lambda x, w: ad.conv2d(x, w, stride=2, pad='reflect-same'),
         [rng.standard_normal((2, 6, 5)), rng.standard_normal((2, 2, 3, 3))]),
        (ad.upsample_bilinear2x, [rng.standard_normal((1, 3, 3))]),
        (lambda x, g, s: ad.channel_norm(x, g, s), [rng.standard_normal((2, 3, 4)), rng.standard_normal(2),
                                                    rng.standard_normal(2)]),
        (ad.softmax, [rng.standard_normal((2, 3))]),
    ]
    for fn, point in cases:
        assert ad.gradcheck(fn, point) < 1e-4


def test_gradcheck_flags_wrong_backward():
    def bad_square(a):
        # backward deliberately off by a sign
        return ad._record('bad_square', a.data * a.data, (a,), lambda g, needs: (-2 * a.data * g,))

    err = ad.gradcheck(bad_square, [np.array([0.5, 1.5, -2.0])])
    assert err > 1.0


def test_deterministic_mode_matches_blas_path():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    fast = ad.conv2d(x, w).data
    previous = ad.is_deterministic()
    ad.set_deterministic(True)
    try:
        strict = ad.conv2d(x, w).data
        strict_again = ad.conv2d(x, w).data
    finally:
        ad.set_deterministic(previous)
    np.testing.assert_allclose(strict, fast, atol=1e-12)
    assert np.array_equal(strict, strict_again)


def test_precision_is_kept():
    x = ad.tensor(np.ones((1, 4, 4)), 'single')
    w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
    assert ad.conv2d(x, w, pad='reflect-same').precision == 'single'
    assert ad.tensor([1.0]).precision == 'double'


TESTS = [
    test_untracked_ops_build_no_tape,
    test_backward_square_sum,
    test_fan_out_accumulates,
    test_watched_store_receives_grads,
    test_param_store_contracts,
    test_backward_rejects_non_scalar_and_foreign_loss,
    test_inputs_from_two_tapes_rejected,
    test_conv2d_matches_oracle_with_stride,
    test_fft_conv_matches_direct,
    test_reflect_same_padding_keeps_size,
    test_pad_reflect_mirrors_without_edge_repeat,
    test_upsample_preserves_constants_and_size,
    test_softmax_is_simplex_and_shift_invariant,
    test_channel_norm_standardizes,
    test_linear_and_leaky_relu_values,
    test_shape_errors,
    test_gradcheck_passes_on_layers,
    test_gradcheck_flags_wrong_backward,
    test_deterministic_mode_matches_blas_path,
    test_precision_is_kept,
]


def main():
    """Run all tests"""
    print("🧪 Autodiff Engine Test Suite")
    print("=" * 60)
    failed = []
    for test in TESTS:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            failed.append(test.__name__)
            print(f"❌ {test.__name__}: {type(e).__name__}: {e}")
    print("\n" + "=" * 60)
    if failed:
        print(f"❌ {len(failed)} of {len(TESTS)} tests failed")
        sys.exit(1)
    print(f"🎉 ALL {len(TESTS)} TESTS PASSED")
    sys.exit(0)


if __name__ == "__main__":
    main()
