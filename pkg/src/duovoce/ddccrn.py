"""Dual-input complex convolutional recurrent enhancement network.

Microphone and vibration spectrograms enter as two complex channels of one
(B, 2, F, T) complex tensor. Encoder stages halve the frequency axis and keep
every frame (causal in time); a complex LSTM runs over frames on the
flattened bottleneck; decoder stages mirror the encoder and consume the
matching skip connection. The last decoder stage emits one complex channel,
used as a polar-form ratio mask on the microphone spectrum.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_io import DualCapture, Waveform, read_capture, require_rate, write_wav
from .autodiff import Tensor, load_checkpoint, save_checkpoint
from .complex_nn import (
    ComplexConvLayer,
    ComplexConvTransposeLayer,
    ComplexDenseLayer,
    ComplexLstmLayer,
    ComplexTensor,
    complex_conv2d,
    complex_conv2d_transpose,
    complex_dense,
    complex_leaky_relu,
    complex_lstm,
    complex_norm,
)
from .spectral import ComplexSpectrogram, StftConfig, istft, istft_tensor, stft

MASK_EPS = 1e-8


class ConfigError(ValueError):
    pass


@dataclass
class DdccrnConfig:
    encoder_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    kernel: tuple = (5, 2)
    stride_freq: list | int = 2
    lstm_hidden: int = 128
    lstm_layers: int = 1
    mask_variant: str = "E"
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.kernel = tuple(int(k) for k in self.kernel)
        if isinstance(self.stride_freq, int):
            self.stride_freq = [self.stride_freq] * len(self.encoder_channels)
        self.stride_freq = [int(s) for s in self.stride_freq]
        if isinstance(self.stft, dict):
            self.stft = StftConfig.from_dict(self.stft)
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise ConfigError(f"kernel must be (kH, kW) with positive sizes, got {self.kernel}")
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError(f"encoder channels must be positive, got {self.encoder_channels}")
        if len(self.stride_freq) != len(self.encoder_channels):
            raise ConfigError("stride_freq needs one entry per encoder stage")
        if any(s < 1 for s in self.stride_freq):
            raise ConfigError(f"strides must be positive, got {self.stride_freq}")
        if self.encoder_channels and (self.lstm_hidden < 1 or self.lstm_layers < 1):
            raise ConfigError("lstm_hidden and lstm_layers must be >= 1")
        if self.mask_variant != "E":
            raise ConfigError(f"only mask variant 'E' is supported, got {self.mask_variant!r}")
        sizes = self.freq_sizes()
        if sizes[-1] < 1:
            raise ConfigError(f"frequency axis collapses through the encoder: {sizes}")

    @property
    def freq_pad(self) -> int:
        return self.kernel[0] // 2

    def freq_sizes(self) -> list:
        """Frequency extent entering each stage, plus the bottleneck extent."""
        sizes = [self.stft.n_bins]
        kh, p = self.kernel[0], self.freq_pad
        for s in self.stride_freq:
            sizes.append((sizes[-1] + 2 * p - kh) // s + 1)
        return sizes

    def to_dict(self) -> dict:
        return {
            "encoder_channels": list(self.encoder_channels),
            "kernel": list(self.kernel),
            "stride_freq": list(self.stride_freq),
            "lstm_hidden": self.lstm_hidden,
            "lstm_layers": self.lstm_layers,
            "mask_variant": self.mask_variant,
            "stft": self.stft.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DdccrnConfig":
        known = {"encoder_channels", "kernel", "stride_freq", "lstm_hidden", "lstm_layers", "mask_variant", "stft"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        try:
            return cls(
                encoder_channels=d["encoder_channels"],
                kernel=tuple(d["kernel"]),
                stride_freq=d.get("stride_freq", 2),
                lstm_hidden=int(d["lstm_hidden"]),
                lstm_layers=int(d.get("lstm_layers", 1)),
                mask_variant=d.get("mask_variant", "E"),
                stft=StftConfig.from_dict(d["stft"]) if "stft" in d else StftConfig(),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from None


def toy_config(**overrides) -> DdccrnConfig:
    base = dict(encoder_channels=[8, 16], kernel=(5, 2), lstm_hidden=32)
    base.update(overrides)
    return DdccrnConfig(**base)


class DdccrnModel:
    def __init__(self, config: DdccrnConfig, encoders, lstms, dense, decoders):
        self.config = config
        self.encoders = encoders
        self.lstms = lstms
        self.dense = dense
        self.decoders = decoders

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.encoders):
            out.update({f"enc.{i}.{k}": v for k, v in layer.parameters().items()})
        for i, layer in enumerate(self.lstms):
            out.update({f"lstm.{i}.{k}": v for k, v in layer.parameters().items()})
        if self.dense is not None:
            out.update({f"dense.{k}": v for k, v in self.dense.parameters().items()})
        for i, layer in enumerate(self.decoders):
            out.update({f"dec.{i}.{k}": v for k, v in layer.parameters().items()})
        return dict(sorted(out.items()))

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data = np.array(state[name], dtype=np.float32)

    def save(self, path):
        """Write ``path`` (tensor checkpoint) and ``path.json`` (config sidecar)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.named_parameters())
        sidecar_path(path).write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DdccrnModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        side = sidecar_path(path)
        if not side.exists():
            raise FileNotFoundError(f"config sidecar not found: {side}")
        model = build(DdccrnConfig.from_dict(json.loads(side.read_text())), seed=0)
        model.load_state_dict(load_checkpoint(path))
        return model


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def build(cfg: DdccrnConfig, seed: int = 0) -> DdccrnModel:
    """Deterministic construction; weights uniform in +-1/sqrt(fan_in), biases zero (LSTM biases uniform)."""
    rng = np.random.default_rng(seed)
    kh, kw = cfg.kernel
    pad_f = cfg.freq_pad
    chans = cfg.encoder_channels
    sizes = cfg.freq_sizes()
    encoders = []
    in_ch = 2
    for c, s in zip(chans, cfg.stride_freq):
        encoders.append(ComplexConvLayer.init(rng, in_ch, c, cfg.kernel, stride=(s, 1), padding=((pad_f, pad_f), (kw - 1, 0))))
        in_ch = c
    lstms = []
    dense = None
    if chans:
        feat = chans[-1] * sizes[-1]
        n_in = feat
        for _ in range(cfg.lstm_layers):
            lstms.append(ComplexLstmLayer.init(rng, n_in, cfg.lstm_hidden))
            n_in = cfg.lstm_hidden
        dense = ComplexDenseLayer.init(rng, cfg.lstm_hidden, feat)
    decoders = []
    for k in reversed(range(len(chans))):
        out_ch = chans[k - 1] if k > 0 else 1
        s = cfg.stride_freq[k]
        target = sizes[k]
        natural = (sizes[k + 1] - 1) * s - 2 * pad_f + kh
        op = target - natural
        if not 0 <= op < max(s, 1) + 1:
            raise ConfigError(f"decoder stage {k} cannot restore frequency size {target} from {sizes[k + 1]}")
        decoders.append(
            ComplexConvTransposeLayer.init(
                rng, 2 * chans[k], out_ch, cfg.kernel, stride=(s, 1),
                padding=((pad_f, pad_f), (0, kw - 1)), output_padding=(op, 0),
            )
        )
    return DdccrnModel(cfg, encoders, lstms, dense, decoders)


def count_params(model: DdccrnModel) -> int:
    return int(sum(p.size for p in model.parameters()))


# -- forward ------------------------------------------------------------------------
def mask_apply_tensor(spec: ComplexTensor, mask: ComplexTensor) -> ComplexTensor:
    """Polar mask: |out| = |spec| tanh(|mask|), phase(out) = phase(spec) + phase(mask)."""
    if spec.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match spectrum shape {spec.shape}")
    mag = ad.sqrt(ad.square(mask.re) + ad.square(mask.im) + MASK_EPS)
    gain = ad.tanh(mag) / mag
    ur, ui = mask.re * gain, mask.im * gain
    return ComplexTensor(spec.re * ur - spec.im * ui, spec.re * ui + spec.im * ur)


def mask_apply(spec: ComplexSpectrogram, mask, variant: str = "E") -> ComplexSpectrogram:
    if variant != "E":
        raise ValueError(f"unsupported mask variant {variant!r}")
    if isinstance(mask, ComplexTensor):
        m = mask.numpy()
    else:
        m = np.asarray(mask)
    if m.shape != spec.real.shape:
        raise ValueError(f"mask shape {m.shape} does not match spectrum shape {spec.real.shape}")
    with ad.no_grad():
        out = mask_apply_tensor(
            ComplexTensor(Tensor(spec.real), Tensor(spec.imag)),
            ComplexTensor(Tensor(np.real(m).astype(np.float64)), Tensor(np.imag(m).astype(np.float64))),
        )
    return ComplexSpectrogram(out.re.data, out.im.data, spec.config, spec.length)


def _spectra(x: np.ndarray, cfg: StftConfig) -> tuple:
    """(B, L) float array -> re, im arrays of shape (B, F, T)."""
    res, ims = [], []
    for row in x:
        s = stft(row, cfg)
        res.append(s.real.T)
        ims.append(s.imag.T)
    return np.stack(res).astype(np.float32), np.stack(ims).astype(np.float32)


def predict_mask(model: DdccrnModel, feats: ComplexTensor) -> ComplexTensor:
    """(B, 2, F, T) complex input -> (B, F, T) complex mask."""
    x = feats
    skips = []
    for layer in model.encoders:
        x = complex_leaky_relu(complex_norm(complex_conv2d(x, layer)))
        skips.append(x)
    if model.encoders:
        b, c, f, t = x.shape
        seq = ComplexTensor(
            ad.reshape(ad.transpose(x.re, (3, 0, 1, 2)), (t, b, c * f)),
            ad.reshape(ad.transpose(x.im, (3, 0, 1, 2)), (t, b, c * f)),
        )
        for layer in model.lstms:
            seq = complex_lstm(seq, layer)
        seq = complex_dense(seq, model.dense)
        x = ComplexTensor(
            ad.transpose(ad.reshape(seq.re, (t, b, c, f)), (1, 2, 3, 0)),
            ad.transpose(ad.reshape(seq.im, (t, b, c, f)), (1, 2, 3, 0)),
        )
    n_dec = len(model.decoders)
    for i, layer in enumerate(model.decoders):
        skip = skips[n_dec - 1 - i]
        x = ComplexTensor(ad.concat([x.re, skip.re], axis=1), ad.concat([x.im, skip.im], axis=1))
        x = complex_conv2d_transpose(x, layer)
        if i < n_dec - 1:
            x = complex_leaky_relu(complex_norm(x))
    if not model.decoders:
        x = ComplexTensor(ad.slice_axis(x.re, 0, 1, 1), ad.slice_axis(x.im, 0, 1, 1))
    b, _, f, t = x.shape
    return ComplexTensor(ad.reshape(x.re, (b, f, t)), ad.reshape(x.im, (b, f, t)))


def enhance_tensor(model: DdccrnModel, mic: np.ndarray, vib: np.ndarray, mask_override: str | None = None) -> Tensor:
    """Batched enhancement of (B, L) arrays; differentiable w.r.t. model parameters.

    ``mask_override`` is a test hook: "identity" bypasses the mask, "zero"
    replaces it by zero.
    """
    cfg = model.config.stft
    mic = np.atleast_2d(np.asarray(mic, dtype=np.float32))
    vib = np.atleast_2d(np.asarray(vib, dtype=np.float32))
    if mic.shape != vib.shape:
        raise ValueError(f"mic/vib shape mismatch: {mic.shape} vs {vib.shape}")
    length = mic.shape[-1]
    if length < cfg.win_length:
        raise ValueError(f"input of {length} samples is shorter than one frame ({cfg.win_length})")
    mr, mi = _spectra(mic, cfg)
    spec = ComplexTensor(Tensor(mr), Tensor(mi))
    if mask_override == "identity":
        out = spec
    elif mask_override == "zero":
        out = ComplexTensor(spec.re * 0.0, spec.im * 0.0)
    elif mask_override is None:
        vr, vi = _spectra(vib, cfg)
        feats = ComplexTensor(Tensor(np.stack([mr, vr], axis=1)), Tensor(np.stack([mi, vi], axis=1)))
        out = mask_apply_tensor(spec, predict_mask(model, feats))
    else:
        raise ValueError(f"unknown mask override {mask_override!r}")
    re = ad.transpose(out.re, (0, 2, 1))
    im = ad.transpose(out.im, (0, 2, 1))
    return istft_tensor(re, im, length, cfg)


def forward(model: DdccrnModel, capture: DualCapture, mask_override: str | None = None) -> Waveform:
    require_rate(capture)
    if len(capture) == 0:
        raise ValueError("cannot enhance an empty capture")
    if mask_override is not None:
        spec = stft(capture.mic, model.config.stft)
        if mask_override == "zero":
            spec = ComplexSpectrogram(np.zeros_like(spec.real), np.zeros_like(spec.imag), spec.config, spec.length)
        elif mask_override != "identity":
            raise ValueError(f"unknown mask override {mask_override!r}")
        return istft(spec)
    with ad.no_grad():
        y = enhance_tensor(model, capture.mic.samples[None], capture.vib.samples[None], mask_override)
    return Waveform(y.data[0], capture.sample_rate_hz)


def enhance_file(model: DdccrnModel, in_path, out_path) -> dict:
    capture = read_capture(in_path)
    t0 = time.perf_counter()
    enhanced = forward(model, capture)
    elapsed = time.perf_counter() - t0
    write_wav(enhanced, out_path)
    return {
        "input": str(in_path),
        "output": str(out_path),
        "samples": len(enhanced),
        "duration_s": enhanced.duration_s,
        "processing_ms": elapsed * 1000.0,
    }
