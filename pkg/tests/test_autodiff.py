import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duovoce import autodiff as ad
from duovoce.autodiff import Tensor, grad_check, sgd_step
from duovoce.autodiff.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint


def naive_conv2d(x, w, stride, pad):
    # direct loops, used as the forward oracle
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


def fd_grad(f, x, eps=1e-6):
    """Independent central-difference gradient of a float64 numpy function."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f(x)
        flat[i] = o - eps
        fm = f(x)
        flat[i] = o
        gf[i] = (fp - fm) / (2 * eps)
    return g


# -- forward examples --------------------------------------------------------------
def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 7))
    y = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64))
    np.testing.assert_array_equal(y.data, x)


def test_conv_hand_counted_overlaps():
    y = ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]])
    np.testing.assert_array_equal(y, expected)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_naive(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
    y = ad.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=stride, padding=pad)
    np.testing.assert_allclose(y.data, naive_conv2d(x, w, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 0), (2, 1)])
def test_conv_transpose_is_adjoint_of_conv(stride, pad):
    rng = np.random.default_rng(7)
    w = rng.normal(size=(4, 3, 3, 2))  # conv: 3 -> 4 channels
    y = rng.normal(size=(1, 3, 9, 8))
    cy = naive_conv2d(y, w, stride, pad)
    x = rng.normal(size=cy.shape)
    # output_padding chosen so the transposed output matches y's size
    oph = 9 - ((cy.shape[2] - 1) * stride - 2 * pad + 3)
    opw = 8 - ((cy.shape[3] - 1) * stride - 2 * pad + 2)
    tx = ad.conv2d_transpose(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), stride=stride,
                             padding=pad, output_padding=(oph, opw)).data
    assert tx.shape == y.shape
    assert np.sum(tx * y) == pytest.approx(np.sum(x * cy), rel=1e-10)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))


def test_default_dtype_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


# -- backward examples -------------------------------------------------------------
def test_square_grad():
    x = Tensor([3.0], requires_grad=True)
    ad.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_sigmoid_grad_at_zero():
    x = Tensor([0.0], requires_grad=True)
    ad.tsum(ad.sigmoid(x)).backward()
    np.testing.assert_allclose(x.grad, [0.25])


def test_broadcast_grad_reduces():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    ad.tsum(a * b).backward()
    np.testing.assert_array_equal(b.grad, [3, 3, 3, 3])


def test_backward_twice_is_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.tsum(ad.tanh(x))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()
    with pytest.raises(RuntimeError):
        ad.tsum(Tensor([1.0, 2.0])).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3
    assert not y.requires_grad


def test_three_layer_composition_against_independent_oracle():
    rng = np.random.default_rng(11)
    w1, w2, w3 = rng.normal(size=(5, 6)) * 0.5, rng.normal(size=(6, 4)) * 0.5, rng.normal(size=(4, 1)) * 0.5
    x0 = rng.normal(size=(3, 5))

    def np_f(x):
        return float(np.sum(np.tanh(1 / (1 + np.exp(-(x @ w1))) @ w2) @ w3))

    x = Tensor(x0.copy(), requires_grad=True)
    h = ad.sigmoid(x @ Tensor(w1))
    ad.tsum(ad.tanh(h @ Tensor(w2)) @ Tensor(w3)).backward()
    num = fd_grad(np_f, x0.copy())
    rel = np.abs(x.grad - num) / np.maximum(np.maximum(np.abs(x.grad), np.abs(num)), 1e-8)
    assert rel.max() < 1e-3
    # same composition through grad_check in 32-bit precision at eps 1e-3
    err = grad_check(lambda t: ad.tsum(ad.tanh(ad.sigmoid(t @ Tensor(w1)) @ Tensor(w2)) @ Tensor(w3)),
                     Tensor(x0), eps=1e-3, dtype=np.float32)
    assert err < 1e-3


# -- grad_check --------------------------------------------------------------------
def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(0).normal(size=10))
    assert grad_check(lambda t: ad.tsum(t * t), x) < 1e-4


def test_grad_check_constant_function():
    x = Tensor(np.random.default_rng(0).normal(size=5))
    assert grad_check(lambda t: ad.tsum(Tensor(np.ones(5))), x) < 1e-3


def test_grad_check_detects_wrong_gradient():
    def bad_square(t):
        return ad.tsum(t * t.detach())  # drops half the gradient

    x = Tensor(np.random.default_rng(0).normal(size=4) + 2)
    assert grad_check(bad_square, x) > 0.3


def test_grad_check_restores_inputs():
    x = Tensor(np.arange(4.0, dtype=np.float32))
    grad_check(lambda t: ad.tsum(t * t), x)
    assert x.dtype == np.float32 and not x.requires_grad and x.grad is None


def test_grad_check_mel_mse_through_conv():
    from duovoce.spectral import MelConfig, StftConfig, mel_spectrogram_tensor

    rng = np.random.default_rng(3)
    cfg = StftConfig(fft_size=32, win_length=16, hop_length=4)
    mel = MelConfig(n_mels=6)
    target = Tensor(rng.normal(size=(1, 1, 1, 120)) * 0.1, dtype=np.float64)
    kernel = Tensor(rng.normal(size=(1, 1, 1, 3)) * 0.5)

    def f(k):
        x = ad.conv2d(target, k, padding=(0, 1))
        a = mel_spectrogram_tensor(ad.reshape(x, (1, 120)), cfg, mel)
        b = mel_spectrogram_tensor(ad.reshape(target, (1, 120)), cfg, mel)
        return ad.mean(ad.square(a - b))

    assert grad_check(f, kernel, eps=1e-5) < 1e-3


# -- property: every primitive op -------------------------------------------------
UNARY = {
    "tanh": ad.tanh, "sigmoid": ad.sigmoid, "exp": ad.exp,
    "relu": ad.relu, "neg": ad.neg, "square": ad.square,
    "log": lambda t: ad.log(ad.square(t) + 0.5), "sqrt": lambda t: ad.sqrt(ad.square(t) + 0.5),
    "sum_axis": lambda t: ad.tsum(t, axis=0), "mean_axis": lambda t: ad.mean(t, axis=1),
    "reshape": lambda t: ad.reshape(t, (-1,)), "transpose": lambda t: ad.transpose(t),
    "slice": lambda t: t[1:, ::2], "softmax": lambda t: ad.softmax(t, axis=-1),
}


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(sorted(UNARY)), st.integers(2, 6), st.integers(2, 6), st.integers(0, 10_000))
def test_unary_ops_pass_grad_check(name, r, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(r, c))
    if name == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep off the kink
    w = Tensor(rng.normal(size=UNARY[name](Tensor(x)).shape))
    assert grad_check(lambda t: ad.tsum(UNARY[name](t) * w), Tensor(x)) < 1e-3


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.square(b) + 1.0),
    "concat0": lambda a, b: ad.concat([a, b], axis=0),
}


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(sorted(BINARY)), st.integers(1, 5), st.integers(1, 5), st.booleans(), st.integers(0, 10_000))
def test_binary_ops_pass_grad_check(name, r, c, broadcast, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(r, c))
    b = rng.normal(size=(c,) if broadcast and name != "concat0" else (r, c))
    out_shape = BINARY[name](Tensor(a), Tensor(b)).shape
    w = Tensor(rng.normal(size=out_shape))
    assert grad_check(lambda x, y: ad.tsum(BINARY[name](x, y) * w), [Tensor(a), Tensor(b)]) < 1e-3


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.sampled_from([1, 2]), st.integers(0, 1), st.integers(0, 10_000))
def test_conv_ops_pass_grad_check(cin, cout, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, cin, 5, 4)))
    w = Tensor(rng.normal(size=(cout, cin, 2, 3)))
    g = Tensor(rng.normal(size=ad.conv2d(x, w, stride, pad).shape))
    assert grad_check(lambda a, b: ad.tsum(ad.conv2d(a, b, stride, pad) * g), [x, w]) < 1e-3
    wt = Tensor(rng.normal(size=(cin, cout, 2, 3)))
    gt = Tensor(rng.normal(size=ad.conv2d_transpose(x, wt, stride, pad).shape))
    assert grad_check(lambda a, b: ad.tsum(ad.conv2d_transpose(a, b, stride, pad) * gt), [x, wt]) < 1e-3


def test_matmul_batched_grad_check():
    rng = np.random.default_rng(5)
    a, b = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(4, 5)))
    assert grad_check(lambda x, y: ad.tsum(ad.tanh(x @ y)), [a, b]) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2))
def test_concat_then_slice_is_identity(ra, rb, c, axis_pick):
    rng = np.random.default_rng(ra * 100 + rb)
    shape_a, shape_b = [2, 3, c], [2, 3, c]
    axis = axis_pick
    shape_a[axis], shape_b[axis] = ra, rb
    a, b = Tensor(rng.normal(size=shape_a)), Tensor(rng.normal(size=shape_b))
    back = ad.slice_axis(ad.concat([a, b], axis=axis), 0, ra, axis)
    np.testing.assert_array_equal(back.data, a.data)


# -- sgd ---------------------------------------------------------------------------
def test_sgd_examples():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0], dtype=np.float32)
    sgd_step([p], 0.5)
    np.testing.assert_array_equal(p.data, [0.0])
    np.testing.assert_array_equal(p.grad, [0.0])


def test_sgd_two_steps_on_square():
    x = Tensor([1.0], requires_grad=True)
    for _ in range(2):
        ad.tsum(x * x).backward()
        sgd_step([x], 0.25)
    assert x.item() == pytest.approx(0.25)


def test_sgd_lr_zero_and_missing_grad():
    p = Tensor([1.5, -2.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0], dtype=np.float32)
    sgd_step([p], 0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    q = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError):
        sgd_step([q], 0.1)


def test_clip_grad_norm():
    p = Tensor([0.0, 0.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert ad.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_average_grads_fixed_order():
    sets = [{"a": np.array([1.0]), "b": np.array([2.0])}, {"a": np.array([3.0]), "b": np.array([6.0])}]
    out = ad.average_grads(sets)
    assert out["a"][0] == 2.0 and out["b"][0] == 4.0


# -- checkpoint format -------------------------------------------------------------
def test_checkpoint_layout_by_hand(tmp_path):
    import struct

    buf = dumps({"b": np.array([1.0, 2.0]), "a": np.zeros((1, 1))})
    expected = (b"DVCK" + struct.pack("<II", 1, 2)
                + struct.pack("<H", 1) + b"a" + struct.pack("<B", 2) + struct.pack("<II", 1, 1)
                + struct.pack("<f", 0.0)
                + struct.pack("<H", 1) + b"b" + struct.pack("<B", 1) + struct.pack("<I", 2)
                + struct.pack("<ff", 1.0, 2.0))
    assert buf == expected
    p = tmp_path / "x.dvck"
    save_checkpoint(p, {"w": Tensor(np.arange(6.0).reshape(2, 3))})
    np.testing.assert_array_equal(load_checkpoint(p)["w"], np.arange(6.0).reshape(2, 3))


def test_checkpoint_rejects_corruption():
    good = dumps({"a": np.ones(3)})
    with pytest.raises(CheckpointError):
        loads(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError):
        loads(good[:-2])
    with pytest.raises(CheckpointError):
        loads(good + b"\0")
