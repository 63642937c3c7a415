"""Gradient oracle suite: every op and layer against central differences on toy shapes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import complex_nn as cnn
from . import losses, spectral
from .autodiff import Tensor, grad_check

THRESHOLD = 1e-3
# Whole-network checks use a smaller step: at 1e-3 a perturbation can cross a
# leaky-ReLU kink, which says nothing about the backward pass. Inputs are float64.
E2E_EPS = 1e-5
MODULES = ("tensor_autodiff", "spectral", "complex_nn", "ddccrn", "losses")


@dataclass
class CheckResult:
    module: str
    op: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < THRESHOLD


class VerificationError(AssertionError):
    def __init__(self, failures):
        self.failures = failures
        worst = max(failures, key=lambda r: r.error if np.isfinite(r.error) else np.inf)
        super().__init__(f"gradient check failed: {worst.module}.{worst.op} max relative error {worst.error:.3e}")


def _t(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.2 + np.abs(x))
    return Tensor(x, requires_grad=True)


def _probe(rng, shape):
    # a random linear read-out turns any output into a scalar with generic gradients
    return Tensor(rng.standard_normal(shape))


def _readout(out, probe):
    return ad.tsum(out * probe)


def _check_op(rng, op, inputs, **kw):
    probe = _probe(rng, op(*inputs).shape)
    return grad_check(lambda *xs: _readout(op(*xs), probe), inputs, **kw)


def _autodiff_cases(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    yield "add", lambda: _check_op(rng, lambda x, y: ad.add(x, y), [a, _t(rng, 4)])
    yield "sub", lambda: _check_op(rng, lambda x, y: ad.sub(x, y), [a, b])
    yield "mul", lambda: _check_op(rng, lambda x, y: ad.mul(x, y), [a, _t(rng, 3, 1)])
    yield "div", lambda: _check_op(rng, lambda x, y: ad.div(x, y), [a, _t(rng, 3, 4, away_from_zero=True)])
    yield "neg", lambda: _check_op(rng, ad.neg, [a])
    yield "power", lambda: _check_op(rng, lambda x: ad.power(x, 3.0), [a])
    yield "square", lambda: _check_op(rng, ad.square, [a])
    yield "exp", lambda: _check_op(rng, ad.exp, [a])
    yield "log", lambda: _check_op(rng, ad.log, [Tensor(rng.uniform(0.5, 2.0, (3, 4)))])
    yield "sqrt", lambda: _check_op(rng, ad.sqrt, [Tensor(rng.uniform(0.5, 2.0, (3, 4)))])
    yield "tanh", lambda: _check_op(rng, ad.tanh, [a])
    yield "sigmoid", lambda: _check_op(rng, ad.sigmoid, [a])
    yield "relu", lambda: _check_op(rng, ad.relu, [_t(rng, 3, 4, away_from_zero=True)])
    yield "leaky_relu", lambda: _check_op(rng, ad.leaky_relu, [_t(rng, 3, 4, away_from_zero=True)])
    yield "clip_min", lambda: _check_op(rng, lambda x: ad.clip_min(x, 0.0), [_t(rng, 3, 4, away_from_zero=True)])
    yield "sum", lambda: _check_op(rng, lambda x: ad.tsum(x, 1, keepdims=True), [a])
    yield "mean", lambda: _check_op(rng, lambda x: ad.mean(x, 0), [a])
    yield "matmul", lambda: _check_op(rng, ad.matmul, [_t(rng, 2, 3, 4), _t(rng, 4, 5)])
    yield "matmul_batched", lambda: _check_op(rng, ad.matmul, [_t(rng, 2, 3, 4), _t(rng, 2, 4, 2)])
    yield "reshape", lambda: _check_op(rng, lambda x: ad.reshape(x, (4, 3)), [a])
    yield "transpose", lambda: _check_op(rng, lambda x: ad.transpose(x, (1, 0)), [a])
    yield "concat", lambda: _check_op(rng, lambda x, y: ad.concat([x, y], axis=1), [a, _t(rng, 3, 2)])
    yield "stack", lambda: _check_op(rng, lambda x, y: ad.stack([x, y], axis=0), [a, b])
    yield "slice", lambda: _check_op(rng, lambda x: ad.slice_axis(x, 1, 3, 1), [a])
    yield "getitem", lambda: _check_op(rng, lambda x: x[np.array([0, 2, 2])], [a])
    idx = rng.integers(0, 4, size=(2, 5))
    yield "gather_last", lambda: _check_op(rng, lambda x: ad.gather_last(x, idx), [a])
    yield "scatter_add_last", lambda: _check_op(rng, lambda x: ad.scatter_add_last(x, idx, 6), [_t(rng, 3, 2, 5)])
    yield "conv2d", lambda: _check_op(
        rng, lambda x, w: ad.conv2d(x, w, stride=(2, 1), padding=((1, 1), (1, 0))), [_t(rng, 1, 2, 5, 4), _t(rng, 3, 2, 3, 2)])
    yield "conv2d_transpose", lambda: _check_op(
        rng, lambda x, w: ad.conv2d_transpose(x, w, stride=(2, 1), padding=((1, 1), (0, 1)), output_padding=(1, 0)),
        [_t(rng, 1, 2, 3, 3), _t(rng, 2, 3, 3, 2)])
    yield "softmax", lambda: _check_op(rng, lambda x: ad.softmax(x, -1), [a])
    yield "log_softmax", lambda: _check_op(rng, lambda x: ad.log_softmax(x, -1), [a])


def _spectral_cases(rng):
    cfg = spectral.StftConfig(fft_size=32, win_length=16, hop_length=4)
    mel = spectral.MelConfig(n_mels=6)

    def stft_re_im(x):
        re, im = spectral.stft_tensor(x, cfg)
        return ad.concat([re, im], axis=-1)

    x = _t(rng, 1, 40)
    yield "stft", lambda: _check_op(rng, stft_re_im, [x])
    n_frames = cfg.n_frames(40)
    yield "istft", lambda: _check_op(
        rng, lambda r, i: spectral.istft_tensor(r, i, 40, cfg), [_t(rng, 1, n_frames, cfg.n_bins), _t(rng, 1, n_frames, cfg.n_bins)])
    yield "log_mel", lambda: _check_op(
        rng, lambda s: spectral.mel_spectrogram_tensor(s, cfg, mel), [_t(rng, 1, 40)])


def _layer_check(rng, run, layer_params, x_tensors, n_coords=None):
    params = list(layer_params.values())
    n_x = len(x_tensors)

    def f(*ts):
        return run(*ts[:n_x])

    probe = None

    def scalar(*ts):
        nonlocal probe
        out = f(*ts)
        if probe is None:
            probe = _probe(rng, out.shape)
        return ad.tsum(out * probe)

    return grad_check(scalar, list(x_tensors) + params, n_coords=n_coords)


def _cat(c):
    return ad.concat([c.re, c.im], axis=0)


def _complex_cases(rng):
    conv = cnn.ComplexConvLayer.init(rng, 2, 3, (3, 2), stride=(2, 1), padding=((1, 1), (1, 0)))
    yield "complex_conv2d", lambda: _layer_check(
        rng, lambda r, i: _cat(cnn.complex_conv2d(cnn.ComplexTensor(r, i), conv)), conv.parameters(),
        [_t(rng, 1, 2, 5, 3), _t(rng, 1, 2, 5, 3)])
    tconv = cnn.ComplexConvTransposeLayer.init(rng, 2, 2, (3, 2), stride=(2, 1), padding=((1, 1), (0, 1)), output_padding=(0, 0))
    yield "complex_conv2d_transpose", lambda: _layer_check(
        rng, lambda r, i: _cat(cnn.complex_conv2d_transpose(cnn.ComplexTensor(r, i), tconv)), tconv.parameters(),
        [_t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)])
    lstm = cnn.ComplexLstmLayer.init(rng, 3, 4)
    yield "complex_lstm", lambda: _layer_check(
        rng, lambda r, i: _cat(cnn.complex_lstm(cnn.ComplexTensor(r, i), lstm)), lstm.parameters(),
        [_t(rng, 4, 2, 3), _t(rng, 4, 2, 3)])
    dense = cnn.ComplexDenseLayer.init(rng, 4, 3)
    yield "complex_dense", lambda: _layer_check(
        rng, lambda r, i: _cat(cnn.complex_dense(cnn.ComplexTensor(r, i), dense)), dense.parameters(),
        [_t(rng, 2, 4), _t(rng, 2, 4)])
    yield "complex_norm", lambda: _layer_check(
        rng, lambda r, i: _cat(cnn.complex_norm(cnn.ComplexTensor(r, i))), {}, [_t(rng, 2, 2, 3, 3), _t(rng, 2, 2, 3, 3)])
    yield "complex_leaky_relu", lambda: _layer_check(
        rng, lambda r, i: _cat(cnn.complex_leaky_relu(cnn.ComplexTensor(r, i))), {},
        [_t(rng, 2, 5, away_from_zero=True), _t(rng, 2, 5, away_from_zero=True)])


def _tiny_model(seed=0):
    from .ddccrn import DdccrnConfig, build

    cfg = DdccrnConfig(encoder_channels=[2, 3], kernel=(3, 2), lstm_hidden=4,
                       stft=spectral.StftConfig(fft_size=32, win_length=16, hop_length=4))
    return build(cfg, seed)


def _ddccrn_cases(rng):
    from .ddccrn import enhance_tensor, mask_apply_tensor

    model = _tiny_model()
    length = 48
    mic = rng.standard_normal((1, length)) * 0.3
    vib = rng.standard_normal((1, length)) * 0.1
    params = model.named_parameters()
    probe = _probe(rng, (1, length))

    def end_to_end(*ps):
        return ad.tsum(enhance_tensor(model, mic, vib) * probe)

    yield "mask_apply", lambda: _check_op(
        rng, lambda sr, si, mr, mi: _cat(mask_apply_tensor(cnn.ComplexTensor(sr, si), cnn.ComplexTensor(mr, mi))),
        [_t(rng, 2, 3), _t(rng, 2, 3), _t(rng, 2, 3), _t(rng, 2, 3)])
    yield "forward", lambda: grad_check(end_to_end, list(params.values()), eps=E2E_EPS, n_coords=6)


def _losses_cases(rng):
    from .teacher import PseudoLabels, TokenDistribution

    cfg = spectral.StftConfig(fft_size=32, win_length=16, hop_length=4)
    mel = spectral.MelConfig(n_mels=6)
    clean = rng.standard_normal((2, 40))
    yield "si_sdr", lambda: grad_check(
        lambda e: ad.mean(losses.si_sdr_tensor(clean, e)), [Tensor(clean + 0.3 * rng.standard_normal((2, 40)))])
    yield "mel_mse", lambda: grad_check(
        lambda e: losses.mel_mse(clean, e, cfg, mel), [Tensor(clean + 0.3 * rng.standard_normal((2, 40)))])
    yield "l_ae", lambda: grad_check(
        lambda e: losses.l_ae(clean, e, losses.LossWeights(), cfg, mel), [Tensor(clean + 0.3 * rng.standard_normal((2, 40)))])
    q = TokenDistribution(Tensor(rng.dirichlet(np.ones(5), size=(2, 3))))
    labels = PseudoLabels(rng.integers(0, 5, size=(2, 3)))
    yield "l_soft", lambda: grad_check(
        lambda z: losses.l_soft(q, TokenDistribution(ad.softmax(z, -1))), [_t(rng, 2, 3, 5)])
    yield "l_hard", lambda: grad_check(
        lambda z: losses.l_hard(TokenDistribution(ad.softmax(z, -1)), labels), [_t(rng, 2, 3, 5)])

    audio = rng.standard_normal((1, 3200)) * 0.1
    est = audio + 0.05 * rng.standard_normal((1, 3200))

    def kd(e):
        soft, hard, _ = losses.distillation_terms(audio, e)
        return losses.l_kd(soft, hard)

    yield "l_kd_teacher", lambda: grad_check(kd, [Tensor(est)], eps=E2E_EPS, n_coords=8)


_SUITES = {
    "tensor_autodiff": _autodiff_cases,
    "spectral": _spectral_cases,
    "complex_nn": _complex_cases,
    "ddccrn": _ddccrn_cases,
    "losses": _losses_cases,
}


def run(module: str = "all", seed: int = 0, report=None) -> list:
    """Run the suite; returns results. ``report(result)`` is called after each check."""
    names = MODULES if module == "all" else (module,)
    unknown = [n for n in names if n not in _SUITES]
    if unknown:
        raise ValueError(f"unknown module {unknown[0]!r}; choose from all, {', '.join(MODULES)}")
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        for op, check in _SUITES[name](rng):
            t0 = time.perf_counter()
            try:
                err = float(check())
            except Exception as exc:  # a crashing backward is a failed check, not a crash of the suite
                err = float("inf")
                op = f"{op} ({type(exc).__name__}: {exc})"
            res = CheckResult(name, op, err, time.perf_counter() - t0)
            results.append(res)
            if report:
                report(res)
    return results


def verify(module: str = "all", seed: int = 0, report=None) -> list:
    results = run(module, seed, report)
    failures = [r for r in results if not r.ok]
    if failures:
        raise VerificationError(failures)
    return results
