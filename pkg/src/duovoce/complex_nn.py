"""Complex-valued layers built from real tensor ops.

A complex activation is a pair of real tensors. Convolutions use the complex
product rule, realised as a single real convolution over stacked
(re, im) channels with the block kernel [[W_re, -W_im], [W_im, W_re]]. The
complex LSTM is two real LSTMs combined by the same rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_EPS = 1e-5
LEAKY_SLOPE = 0.1


@dataclass
class ComplexTensor:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if not isinstance(self.re, Tensor):
            self.re = Tensor(self.re)
        if not isinstance(self.im, Tensor):
            self.im = Tensor(self.im)
        if self.re.shape != self.im.shape:
            raise ValueError(f"re/im shape mismatch: {self.re.shape} vs {self.im.shape}")

    @property
    def shape(self):
        return self.re.shape

    def __add__(self, other):
        return ComplexTensor(self.re + other.re, self.im + other.im)

    def __sub__(self, other):
        return ComplexTensor(self.re - other.re, self.im - other.im)

    def scale(self, alpha: complex) -> "ComplexTensor":
        a, b = float(np.real(alpha)), float(np.imag(alpha))
        return ComplexTensor(self.re * a - self.im * b, self.re * b + self.im * a)

    def abs(self) -> np.ndarray:
        return np.hypot(self.re.data, self.im.data)

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @classmethod
    def from_numpy(cls, z, dtype=np.float32) -> "ComplexTensor":
        z = np.asarray(z)
        return cls(Tensor(z.real.astype(dtype)), Tensor(z.imag.astype(dtype)))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


class ComplexConvLayer:
    """Complex 2-d convolution; kernels are (out_ch, in_ch, kH, kW)."""

    def __init__(self, W_re, W_im, b_re, b_im, stride=1, padding=0):
        self.W_re, self.W_im, self.b_re, self.b_im = W_re, W_im, b_re, b_im
        if W_re.shape != W_im.shape:
            raise ValueError(f"W_re/W_im shape mismatch: {W_re.shape} vs {W_im.shape}")
        self.stride = stride
        self.padding = padding

    @classmethod
    def init(cls, rng, in_ch, out_ch, kernel, stride=1, padding=0):
        kh, kw = kernel
        fan_in = 2 * in_ch * kh * kw
        shape = (out_ch, in_ch, kh, kw)
        return cls(_uniform(rng, shape, fan_in), _uniform(rng, shape, fan_in), _zeros(out_ch), _zeros(out_ch), stride, padding)

    def parameters(self) -> dict:
        return {"W_re": self.W_re, "W_im": self.W_im, "b_re": self.b_re, "b_im": self.b_im}


class ComplexConvTransposeLayer:
    """Complex transposed convolution; kernels are (in_ch, out_ch, kH, kW)."""

    def __init__(self, W_re, W_im, b_re, b_im, stride=1, padding=0, output_padding=0):
        self.W_re, self.W_im, self.b_re, self.b_im = W_re, W_im, b_re, b_im
        if W_re.shape != W_im.shape:
            raise ValueError(f"W_re/W_im shape mismatch: {W_re.shape} vs {W_im.shape}")
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    @classmethod
    def init(cls, rng, in_ch, out_ch, kernel, stride=1, padding=0, output_padding=0):
        kh, kw = kernel
        fan_in = 2 * in_ch * kh * kw
        shape = (in_ch, out_ch, kh, kw)
        return cls(
            _uniform(rng, shape, fan_in), _uniform(rng, shape, fan_in), _zeros(out_ch), _zeros(out_ch),
            stride, padding, output_padding,
        )

    def parameters(self) -> dict:
        return {"W_re": self.W_re, "W_im": self.W_im, "b_re": self.b_re, "b_im": self.b_im}


def _bias4(b: Tensor) -> Tensor:
    return ad.reshape(b, (1, b.shape[0], 1, 1))


def complex_conv2d(x: ComplexTensor, layer: ComplexConvLayer) -> ComplexTensor:
    out_ch, in_ch = layer.W_re.shape[:2]
    if x.re.ndim != 4 or x.re.shape[1] != in_ch:
        raise ValueError(f"complex_conv2d: input {x.shape} does not match kernel {layer.W_re.shape}")
    top = ad.concat([layer.W_re, -layer.W_im], axis=1)
    bottom = ad.concat([layer.W_im, layer.W_re], axis=1)
    kernel = ad.concat([top, bottom], axis=0)
    y = ad.conv2d(ad.concat([x.re, x.im], axis=1), kernel, layer.stride, layer.padding)
    re = ad.slice_axis(y, 0, out_ch, 1) + _bias4(layer.b_re)
    im = ad.slice_axis(y, out_ch, 2 * out_ch, 1) + _bias4(layer.b_im)
    return ComplexTensor(re, im)


def complex_conv2d_transpose(x: ComplexTensor, layer: ComplexConvTransposeLayer) -> ComplexTensor:
    in_ch, out_ch = layer.W_re.shape[:2]
    if x.re.ndim != 4 or x.re.shape[1] != in_ch:
        raise ValueError(f"complex_conv2d_transpose: input {x.shape} does not match kernel {layer.W_re.shape}")
    # rows index input channels here, so the block layout is the transpose of the forward case
    top = ad.concat([layer.W_re, layer.W_im], axis=1)
    bottom = ad.concat([-layer.W_im, layer.W_re], axis=1)
    kernel = ad.concat([top, bottom], axis=0)
    y = ad.conv2d_transpose(
        ad.concat([x.re, x.im], axis=1), kernel, layer.stride, layer.padding, layer.output_padding
    )
    re = ad.slice_axis(y, 0, out_ch, 1) + _bias4(layer.b_re)
    im = ad.slice_axis(y, out_ch, 2 * out_ch, 1) + _bias4(layer.b_im)
    return ComplexTensor(re, im)


class RealLstm:
    """Single-layer LSTM; gate order i, f, g, o along the 4H axis."""

    def __init__(self, W_ih: Tensor, W_hh: Tensor, b: Tensor):
        d, h4 = W_ih.shape
        if h4 % 4 or W_hh.shape != (h4 // 4, h4) or b.shape != (h4,):
            raise ValueError(f"inconsistent LSTM weights: {W_ih.shape}, {W_hh.shape}, {b.shape}")
        self.W_ih, self.W_hh, self.b = W_ih, W_hh, b

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[0]

    @classmethod
    def init(cls, rng, input_size, hidden):
        return cls(
            _uniform(rng, (input_size, 4 * hidden), hidden),
            _uniform(rng, (hidden, 4 * hidden), hidden),
            _uniform(rng, (4 * hidden,), hidden),
        )

    def parameters(self) -> dict:
        return {"W_ih": self.W_ih, "W_hh": self.W_hh, "b": self.b}

    def run(self, x_seq: Tensor) -> Tensor:
        """(T, B, D) -> (T, B, H) from zero initial state."""
        n_steps, batch, _ = x_seq.shape
        hsz = self.hidden
        xw = x_seq @ self.W_ih + self.b
        h = Tensor(np.zeros((batch, hsz), dtype=x_seq.dtype))
        c = Tensor(np.zeros((batch, hsz), dtype=x_seq.dtype))
        outs = []
        for t in range(n_steps):
            gates = xw[t] + h @ self.W_hh
            i = ad.sigmoid(gates[:, 0:hsz])
            f = ad.sigmoid(gates[:, hsz : 2 * hsz])
            g = ad.tanh(gates[:, 2 * hsz : 3 * hsz])
            o = ad.sigmoid(gates[:, 3 * hsz :])
            c = f * c + i * g
            h = o * ad.tanh(c)
            outs.append(h)
        return ad.stack(outs, axis=0)


class ComplexLstmLayer:
    def __init__(self, lstm_r: RealLstm, lstm_i: RealLstm):
        if lstm_r.W_ih.shape != lstm_i.W_ih.shape or lstm_r.hidden != lstm_i.hidden:
            raise ValueError("real and imaginary LSTMs must have identical sizes")
        self.lstm_r, self.lstm_i = lstm_r, lstm_i

    @classmethod
    def init(cls, rng, input_size, hidden):
        return cls(RealLstm.init(rng, input_size, hidden), RealLstm.init(rng, input_size, hidden))

    def parameters(self) -> dict:
        out = {f"r.{k}": v for k, v in self.lstm_r.parameters().items()}
        out.update({f"i.{k}": v for k, v in self.lstm_i.parameters().items()})
        return out


def complex_lstm(x_seq: ComplexTensor, layer: ComplexLstmLayer) -> ComplexTensor:
    """(T, B, D) complex sequence -> (T, B, H).

    re = LSTM_r(x.re) - LSTM_i(x.im); im = LSTM_i(x.re) + LSTM_r(x.im).
    """
    if x_seq.re.ndim != 3 or x_seq.re.shape[0] == 0:
        raise ValueError(f"complex_lstm needs a non-empty (T, B, D) sequence, got {x_seq.shape}")
    batch = x_seq.re.shape[1]
    both = ad.concat([x_seq.re, x_seq.im], axis=1)
    from_r = layer.lstm_r.run(both)
    from_i = layer.lstm_i.run(both)
    f_rr, f_ir = from_r[:, :batch], from_r[:, batch:]
    f_ri, f_ii = from_i[:, :batch], from_i[:, batch:]
    return ComplexTensor(f_rr - f_ii, f_ri + f_ir)


class ComplexDenseLayer:
    """Complex affine map on the last axis; weights are (in, out)."""

    def __init__(self, W_re, W_im, b_re, b_im):
        if W_re.shape != W_im.shape:
            raise ValueError(f"W_re/W_im shape mismatch: {W_re.shape} vs {W_im.shape}")
        self.W_re, self.W_im, self.b_re, self.b_im = W_re, W_im, b_re, b_im

    @classmethod
    def init(cls, rng, n_in, n_out):
        return cls(
            _uniform(rng, (n_in, n_out), 2 * n_in), _uniform(rng, (n_in, n_out), 2 * n_in),
            _zeros(n_out), _zeros(n_out),
        )

    def parameters(self) -> dict:
        return {"W_re": self.W_re, "W_im": self.W_im, "b_re": self.b_re, "b_im": self.b_im}


def complex_dense(x: ComplexTensor, layer: ComplexDenseLayer) -> ComplexTensor:
    re = x.re @ layer.W_re - x.im @ layer.W_im + layer.b_re
    im = x.re @ layer.W_im + x.im @ layer.W_re + layer.b_im
    return ComplexTensor(re, im)


def complex_norm(x: ComplexTensor, eps: float = NORM_EPS) -> ComplexTensor:
    """Standardize each (sample, channel) slice of a (B, C, ...) tensor.

    Mean and variance are pooled over the real and imaginary parts together,
    then the same shift and scale is applied to both.
    """
    if x.re.ndim < 2:
        raise ValueError(f"complex_norm needs (B, C, ...) input, got {x.shape}")
    axes = tuple(range(2, x.re.ndim))
    n = 2 * int(np.prod([x.re.shape[a] for a in axes])) if axes else 2
    mu = (ad.tsum(x.re, axes, keepdims=True) + ad.tsum(x.im, axes, keepdims=True)) * (1.0 / n)
    dr = x.re - mu
    di = x.im - mu
    var = (ad.tsum(ad.square(dr), axes, keepdims=True) + ad.tsum(ad.square(di), axes, keepdims=True)) * (1.0 / n)
    inv = 1.0 / ad.sqrt(var + eps)
    return ComplexTensor(dr * inv, di * inv)


def complex_leaky_relu(x: ComplexTensor, slope: float = LEAKY_SLOPE) -> ComplexTensor:
    return ComplexTensor(ad.leaky_relu(x.re, slope), ad.leaky_relu(x.im, slope))
