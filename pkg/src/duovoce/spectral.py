"""Centered STFT / iSTFT, mel filterbank and log-mel spectrograms.

Two routes compute the same transforms: numpy FFTs for plain analysis, and
DFT-matrix products on :class:`Tensor` for anything a loss must
differentiate through. Frames are centered: the signal is reflection-padded
by ``win_length // 2`` on both ends, each windowed frame of ``win_length``
samples is zero-padded to ``fft_size``, and synthesis divides the
overlap-added frames by the overlap-added squared window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from . import autodiff as ad
from .audio_io import SAMPLE_RATE, Waveform, require_rate

LOG_EPS = 1e-10

_WINDOWS = {"hann": "hann", "hamming": "hamming", "rect": "boxcar", "boxcar": "boxcar", "blackman": "blackman"}


class StftConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    win_length: int = 400
    hop_length: int = 100
    window: str = "hann"

    def __post_init__(self):
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise StftConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 < self.win_length <= self.fft_size:
            raise StftConfigError(f"win_length must be in (0, fft_size], got {self.win_length}")
        if not 0 < self.hop_length <= self.win_length:
            raise StftConfigError(f"hop_length must be in (0, win_length], got {self.hop_length}")
        if self.window not in _WINDOWS:
            raise StftConfigError(f"unknown window '{self.window}'; choose from {sorted(_WINDOWS)}")
        # the squared window summed over hop-shifted copies must never vanish
        w2 = np.square(self.window_array())
        steady = np.zeros(self.hop_length)
        for start in range(0, self.win_length, self.hop_length):
            chunk = w2[start : start + self.hop_length]
            steady[: len(chunk)] += chunk
        if steady.min() <= 1e-10 * max(steady.max(), 1e-30):
            raise StftConfigError(
                f"window '{self.window}' with hop {self.hop_length} violates the overlap-add condition"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> int:
        return self.win_length // 2

    def window_array(self) -> np.ndarray:
        return get_window(_WINDOWS[self.window], self.win_length, fftbins=True).astype(np.float64)

    def n_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        return 1 + (padded - self.win_length) // self.hop_length if padded >= self.win_length else 0

    def to_dict(self) -> dict:
        return {
            "fft_size": self.fft_size,
            "win_length": self.win_length,
            "hop_length": self.hop_length,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StftConfig":
        return cls(int(d["fft_size"]), int(d["win_length"]), int(d["hop_length"]), str(d["window"]))


@dataclass
class ComplexSpectrogram:
    """Frames x bins real and imaginary parts; ``length`` is the source signal length."""

    real: np.ndarray
    imag: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real/imag shape mismatch: {self.real.shape} vs {self.imag.shape}")
        if self.real.ndim != 2 or self.real.shape[1] != self.config.n_bins:
            raise ValueError(f"expected frames x {self.config.n_bins} matrices, got {self.real.shape}")

    @property
    def n_frames(self) -> int:
        return self.real.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    def complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


# -- framing --------------------------------------------------------------------
def _frame_index(length: int, cfg: StftConfig) -> np.ndarray:
    """Index of each frame sample into the unpadded signal, reflection folded."""
    n_frames = cfg.n_frames(length)
    pos = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :] - cfg.pad
    if length == 1:
        return np.zeros_like(pos)
    period = 2 * (length - 1)
    pos = np.mod(pos, period)
    return np.where(pos >= length, period - pos, pos)


def _check_length(length: int, cfg: StftConfig):
    if length == 0:
        raise ValueError("cannot take the STFT of an empty waveform")
    if length <= cfg.pad:
        raise ValueError(f"waveform of {length} samples is too short for reflection padding of {cfg.pad}")
    if cfg.n_frames(length) < 1:
        raise ValueError(f"waveform of {length} samples yields no complete frame")


def _ola_norm(n_frames: int, length: int, cfg: StftConfig) -> np.ndarray:
    w2 = np.square(cfg.window_array())
    total = cfg.hop_length * (n_frames - 1) + cfg.win_length
    acc = np.zeros(total)
    for t in range(n_frames):
        s = t * cfg.hop_length
        acc[s : s + cfg.win_length] += w2
    norm = acc[cfg.pad : cfg.pad + length]
    if norm.shape[0] < length:
        raise ValueError(f"{n_frames} frames cannot cover {length} samples")
    if np.any(norm <= 1e-10):
        raise ValueError("zero overlap-add normalization; the window/hop pair is not invertible")
    return norm


# -- numpy route ----------------------------------------------------------------
def stft(w: Waveform | np.ndarray, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    if isinstance(w, Waveform):
        require_rate(w)
        x = w.samples.astype(np.float64)
    else:
        x = np.asarray(w, dtype=np.float64)
    _check_length(len(x), cfg)
    frames = x[_frame_index(len(x), cfg)] * cfg.window_array()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return ComplexSpectrogram(spec.real.copy(), spec.imag.copy(), cfg, len(x))


def istft(s: ComplexSpectrogram, length: int | None = None) -> Waveform:
    cfg = s.config
    if length is None:
        length = s.length if s.length is not None else (s.n_frames - 1) * cfg.hop_length
    frames = np.fft.irfft(s.real + 1j * s.imag, n=cfg.fft_size, axis=-1)[:, : cfg.win_length]
    frames *= cfg.window_array()
    total = cfg.hop_length * (s.n_frames - 1) + cfg.win_length
    acc = np.zeros(total)
    for t in range(s.n_frames):
        st = t * cfg.hop_length
        acc[st : st + cfg.win_length] += frames[t]
    norm = _ola_norm(s.n_frames, length, cfg)
    return Waveform(acc[cfg.pad : cfg.pad + length] / norm, SAMPLE_RATE)


# -- tensor route -----------------------------------------------------------------
_dft_cache: dict = {}


def _dft_mats(cfg: StftConfig, dtype):
    key = (cfg, np.dtype(dtype).str)
    if key not in _dft_cache:
        n = cfg.fft_size
        k = np.arange(cfg.n_bins)
        t = np.arange(cfg.win_length)
        ang = 2 * np.pi * np.outer(t, k) / n
        win = cfg.window_array()[:, None]
        fwd_re = win * np.cos(ang)
        fwd_im = -win * np.sin(ang)
        # inverse real DFT: interior bins counted twice
        wgt = np.full(cfg.n_bins, 2.0)
        wgt[0] = 1.0
        if n % 2 == 0:
            wgt[-1] = 1.0
        inv_re = (wgt[:, None] * np.cos(ang.T)) / n * win.T
        inv_im = (-wgt[:, None] * np.sin(ang.T)) / n * win.T
        _dft_cache[key] = tuple(m.astype(dtype) for m in (fwd_re, fwd_im, inv_re, inv_im))
    return _dft_cache[key]


def stft_tensor(x: ad.Tensor, cfg: StftConfig | None = None):
    """Differentiable STFT of a (..., L) tensor -> (re, im), each (..., frames, bins)."""
    cfg = cfg or StftConfig()
    _check_length(x.shape[-1], cfg)
    fwd_re, fwd_im, _, _ = _dft_mats(cfg, x.dtype)
    frames = ad.gather_last(x, _frame_index(x.shape[-1], cfg))
    return frames @ ad.Tensor(fwd_re), frames @ ad.Tensor(fwd_im)


def istft_tensor(re: ad.Tensor, im: ad.Tensor, length: int, cfg: StftConfig | None = None) -> ad.Tensor:
    """Differentiable inverse of :func:`stft_tensor`; returns (..., length)."""
    cfg = cfg or StftConfig()
    n_frames = re.shape[-2]
    _, _, inv_re, inv_im = _dft_mats(cfg, re.dtype)
    frames = re @ ad.Tensor(inv_re) + im @ ad.Tensor(inv_im)
    starts = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.win_length)[None, :]
    total = cfg.hop_length * (n_frames - 1) + cfg.win_length
    summed = ad.scatter_add_last(frames, starts, total)
    norm = _ola_norm(n_frames, length, cfg).astype(re.dtype)
    return ad.slice_axis(summed, cfg.pad, cfg.pad + length, -1) * ad.Tensor(1.0 / norm)


# -- mel ----------------------------------------------------------------------------
@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_mels <= 0:
            raise ValueError(f"n_mels must be positive, got {self.n_mels}")
        if not 0 <= self.f_min_hz < self.f_max_hz <= self.sample_rate_hz / 2:
            raise ValueError(
                f"need 0 <= f_min < f_max <= fs/2, got {self.f_min_hz}, {self.f_max_hz} at {self.sample_rate_hz} Hz"
            )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(mel_cfg: MelConfig) -> np.ndarray:
    """n_mels + 2 edge frequencies (Hz); band j spans edges[j]..edges[j + 2], peak at edges[j + 1]."""
    pts = np.linspace(hz_to_mel(mel_cfg.f_min_hz), hz_to_mel(mel_cfg.f_max_hz), mel_cfg.n_mels + 2)
    return mel_to_hz(pts)


def mel_filterbank(mel_cfg: MelConfig | None = None, fft_size: int = 512) -> np.ndarray:
    """Peak-normalized triangular filters, shape (n_mels, fft_size // 2 + 1)."""
    mel_cfg = mel_cfg or MelConfig()
    edges = mel_band_edges(mel_cfg)
    freqs = np.arange(fft_size // 2 + 1) * mel_cfg.sample_rate_hz / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{mel_cfg.n_mels} mel bands are too many for fft_size {fft_size}: "
            f"{empty.size} band(s) contain no FFT bin (first: band {empty[0]})"
        )
    return fb


_fb_cache: dict = {}


def cached_filterbank(mel_cfg: MelConfig, fft_size: int) -> np.ndarray:
    key = (mel_cfg, fft_size)
    if key not in _fb_cache:
        _fb_cache[key] = mel_filterbank(mel_cfg, fft_size)
    return _fb_cache[key]


def mel_spectrogram(w: Waveform | np.ndarray, cfg: StftConfig | None = None, mel_cfg: MelConfig | None = None) -> np.ndarray:
    """log(mel power + 1e-10), shape (frames, n_mels)."""
    cfg = cfg or StftConfig()
    mel_cfg = mel_cfg or MelConfig()
    s = stft(w, cfg)
    power = s.real**2 + s.imag**2
    return np.log(power @ cached_filterbank(mel_cfg, cfg.fft_size).T + LOG_EPS)


def mel_spectrogram_tensor(x: ad.Tensor, cfg: StftConfig | None = None, mel_cfg: MelConfig | None = None) -> ad.Tensor:
    cfg = cfg or StftConfig()
    mel_cfg = mel_cfg or MelConfig()
    re, im = stft_tensor(x, cfg)
    return log_mel_from_spec(re, im, cfg, mel_cfg)


def log_mel_from_spec(re: ad.Tensor, im: ad.Tensor, cfg: StftConfig, mel_cfg: MelConfig) -> ad.Tensor:
    fb = cached_filterbank(mel_cfg, cfg.fft_size).T.astype(re.dtype)
    power = ad.square(re) + ad.square(im)
    return ad.log(power @ ad.Tensor(fb) + LOG_EPS)
