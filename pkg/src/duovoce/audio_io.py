"""PCM WAV I/O for mono waveforms and (vibration, microphone) stereo captures.

A capture is stored as an ordinary stereo file: vibration sensor on the left
channel, microphone on the right.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
_INT16_SCALE = 32768.0


class AudioFormatError(ValueError):
    """Base class for unreadable or unexpected audio files."""


class NotAWavError(AudioFormatError):
    pass


class ChannelCountError(AudioFormatError):
    pass


class UnsupportedEncodingError(AudioFormatError):
    pass


class SampleRateError(AudioFormatError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass
class DualCapture:
    vib: Waveform
    mic: Waveform

    def __post_init__(self):
        if len(self.vib) != len(self.mic):
            raise ValueError(f"vib/mic length mismatch: {len(self.vib)} vs {len(self.mic)}")
        if self.vib.sample_rate_hz != self.mic.sample_rate_hz:
            raise ValueError(
                f"vib/mic sample rate mismatch: {self.vib.sample_rate_hz} vs {self.mic.sample_rate_hz}"
            )

    @property
    def sample_rate_hz(self) -> int:
        return self.mic.sample_rate_hz

    def __len__(self):
        return len(self.mic)


def require_rate(w: Waveform | DualCapture, rate: int = SAMPLE_RATE):
    if w.sample_rate_hz != rate:
        raise SampleRateError(f"expected {rate} Hz audio, got {w.sample_rate_hz} Hz (resampling is not supported)")


def _read(path):
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except (ValueError, EOFError) as exc:
        raise NotAWavError(f"{path}: not a readable RIFF/WAVE file ({exc})") from None
    if data.dtype == np.int16:
        data = data.astype(np.float32) / _INT16_SCALE
    elif data.dtype == np.float32:
        data = data.astype(np.float32)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample encoding {data.dtype}; need 16-bit PCM or float32")
    return int(rate), data


def read_wav(path) -> Waveform:
    rate, data = _read(path)
    if data.ndim != 1:
        raise ChannelCountError(f"{path}: expected 1 channel, found {data.shape[1]}")
    return Waveform(data, rate)


def read_capture(path) -> DualCapture:
    """Left channel becomes ``vib``, right channel ``mic``."""
    rate, data = _read(path)
    channels = 1 if data.ndim == 1 else data.shape[1]
    if channels != 2:
        raise ChannelCountError(f"{path}: expected 2 channels (vib, mic), found {channels}")
    return DualCapture(vib=Waveform(data[:, 0], rate), mic=Waveform(data[:, 1], rate))


def _quantize(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.round(x * _INT16_SCALE), -32768, 32767).astype(np.int16)


def write_wav(obj: Waveform | DualCapture, path, *, float32: bool = False):
    """Write a mono waveform or a stereo capture; 16-bit PCM unless ``float32``."""
    if isinstance(obj, DualCapture):
        data = np.stack([obj.vib.samples, obj.mic.samples], axis=1)
        rate = obj.sample_rate_hz
    else:
        data = obj.samples
        rate = obj.sample_rate_hz
    data = np.clip(data, -1.0, 1.0).astype(np.float32) if float32 else _quantize(data)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), rate, data)


def rms(w) -> float:
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(x * x)))


def peak_normalize(w: Waveform, peak: float = 0.99) -> Waveform:
    m = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    if m == 0.0:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    return Waveform(w.samples * (peak / m), w.sample_rate_hz)
