"""Frozen stand-in recognizer used as distillation teacher and ASR scorer.

Log-mel front end clamped to a fixed range below the loudest bin of each
utterance (which makes it gain invariant and deaf to faint noise), two stride-2 temporal convolutions with tanh, then a
decoder that pools the hidden states into one segment per output position
and combines the pooled state with an embedding of the previous token. All
parameters are drawn once from a fixed seed and never trained.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .audio_io import Waveform, require_rate
from .autodiff import Tensor
from .spectral import MelConfig, StftConfig, mel_spectrogram_tensor

TEACHER_SEED = 42
VOCAB_SIZE = 64
STATE_DIM = 64
FRAMES_PER_TOKEN = 4
EMBED_SCALE = 0.5
DYNAMIC_RANGE = 7.0  # natural-log units kept below each utterance's loudest mel bin


@dataclass
class TeacherStates:
    hidden: Tensor  # (B, frames, dim)

    def __post_init__(self):
        if not np.all(np.isfinite(self.hidden.data)):
            raise ValueError("teacher states contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.hidden.shape[1]


@dataclass
class TokenDistribution:
    probs: Tensor  # (B, N, V)

    def __post_init__(self):
        p = self.probs.data
        if p.ndim == 2:
            self.probs = ad.reshape(self.probs, (1,) + p.shape)
            p = self.probs.data
        if p.ndim != 3:
            raise ValueError(f"token distributions need shape (B, N, V), got {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-5):
            raise ValueError("each position must hold a probability vector summing to 1")

    @property
    def positions(self) -> int:
        return self.probs.shape[1]

    @property
    def vocab(self) -> int:
        return self.probs.shape[2]


@dataclass
class PseudoLabels:
    tokens: np.ndarray  # (B, N) int

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.int64)
        if t.ndim == 1:
            t = t[None]
        if t.ndim != 2 or t.shape[1] < 1:
            raise ValueError(f"pseudo-labels need at least one token, got shape {t.shape}")
        self.tokens = t


class StubTeacher:
    def __init__(self, seed: int = TEACHER_SEED, vocab: int = VOCAB_SIZE, dim: int = STATE_DIM,
                 stft_cfg: StftConfig | None = None, mel_cfg: MelConfig | None = None):
        self.vocab = vocab
        self.dim = dim
        self.stft_cfg = stft_cfg or StftConfig()
        self.mel_cfg = mel_cfg or MelConfig()
        rng = np.random.default_rng(seed)
        n_mels = self.mel_cfg.n_mels
        self.conv1 = Tensor(rng.normal(0, 1.0 / np.sqrt(3 * n_mels), (dim, n_mels, 1, 3)).astype(np.float32))
        self.conv2 = Tensor(rng.normal(0, 1.5 / np.sqrt(3 * dim), (dim, dim, 1, 3)).astype(np.float32))
        self.w_out = Tensor(rng.normal(0, 6.0 / np.sqrt(dim), (dim, vocab)).astype(np.float32))
        self.embed = rng.normal(0, EMBED_SCALE, (vocab + 1, vocab)).astype(np.float32)  # last row: start token

    def encode(self, x) -> TeacherStates:
        """Waveform, (B, L) array or (B, L) Tensor -> states (B, ceil(frames / 4), dim)."""
        if isinstance(x, Waveform):
            require_rate(x)
            x = x.samples[None]
        if not isinstance(x, Tensor):
            x = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float32)))
        logmel = mel_spectrogram_tensor(x, self.stft_cfg, self.mel_cfg)  # (B, T, M)
        b, t, m = logmel.shape
        flat = ad.reshape(logmel, (b, t * m))
        peak = flat[np.arange(b), np.argmax(flat.data, axis=1)]
        floor = ad.reshape(peak, (b, 1, 1)) - DYNAMIC_RANGE
        z = (ad.relu(logmel - floor) - 0.5 * DYNAMIC_RANGE) * (2.0 / DYNAMIC_RANGE)
        h = ad.reshape(ad.transpose(z, (0, 2, 1)), (z.shape[0], z.shape[2], 1, z.shape[1]))
        h = ad.tanh(ad.conv2d(h, self.conv1, stride=(1, 2), padding=(0, 1)))
        h = ad.tanh(ad.conv2d(h, self.conv2, stride=(1, 2), padding=(0, 1)))
        b, d, _, t = h.shape
        h = ad.transpose(ad.reshape(h, (b, d, t)), (0, 2, 1))
        return TeacherStates(h - ad.mean(h, axis=1, keepdims=True))

    def n_tokens(self, states: TeacherStates) -> int:
        return max(1, states.n_frames // FRAMES_PER_TOKEN)

    def _pool(self, states: TeacherStates, n: int) -> Tensor:
        t = states.n_frames
        if n > t:
            raise ValueError(f"{n} positions exceed the {t} available state frames")
        pool = np.zeros((n, t), dtype=states.hidden.dtype)
        for i, seg in enumerate(np.array_split(np.arange(t), n)):
            pool[i, seg] = 1.0 / len(seg)
        return Tensor(pool) @ states.hidden  # (B, n, dim)

    def _prev_embedding(self, prefix: np.ndarray) -> np.ndarray:
        prev = np.concatenate([np.full((prefix.shape[0], 1), self.vocab), prefix[:, :-1]], axis=1)
        return self.embed[prev]

    def decode(self, states: TeacherStates, prefix: PseudoLabels) -> TokenDistribution:
        """Teacher-forced distributions; position i conditions on prefix tokens < i only."""
        tokens = prefix.tokens
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token ids must lie in [0, {self.vocab})")
        if tokens.shape[0] not in (1, states.hidden.shape[0]):
            raise ValueError("prefix batch does not match states batch")
        pooled = self._pool(states, tokens.shape[1])
        logits = pooled @ self.w_out + Tensor(self._prev_embedding(tokens).astype(pooled.dtype))
        return TokenDistribution(ad.softmax(logits, axis=-1))

    def greedy(self, states: TeacherStates, n: int | None = None) -> np.ndarray:
        """Greedy token sequence, shape (B, n)."""
        n = self.n_tokens(states) if n is None else n
        with ad.no_grad():
            base = (self._pool(states, n) @ self.w_out).data
        out = np.zeros(base.shape[:2], dtype=np.int64)
        prev = np.full(base.shape[0], self.vocab)
        for i in range(n):
            out[:, i] = np.argmax(base[:, i] + self.embed[prev], axis=-1)
            prev = out[:, i]
        return out

    def transcribe(self, x) -> np.ndarray:
        """Greedy decode of a single waveform -> 1-d token array."""
        with ad.no_grad():
            return self.greedy(self.encode(x))[0]


@lru_cache(maxsize=None)
def default_teacher() -> StubTeacher:
    return StubTeacher()


def stub_teacher_encode(w) -> TeacherStates:
    return default_teacher().encode(w)


def stub_teacher_decode(states: TeacherStates, prefix) -> TokenDistribution:
    if not isinstance(prefix, PseudoLabels):
        prefix = PseudoLabels(prefix)
    return default_teacher().decode(states, prefix)
