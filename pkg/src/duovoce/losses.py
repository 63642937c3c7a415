"""Training objectives: audio-enhancement loss and distillation losses.

total = ae + lambda_kd * kd
ae    = MSE(logmel(clean), logmel(enhanced)) - lambda_si * SI-SDR(clean, enhanced)
kd    = lambda_soft * mean_i KL(Q_i || P_i) + lambda_hard * mean_i -log P_i(label_i)

Q is the teacher distribution on clean audio, P the teacher distribution on
enhanced audio, both teacher-forced on pseudo-labels decoded from the clean
signal. The SI-SDR term enters with a minus sign so that minimizing the loss
raises SI-SDR.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .audio_io import Waveform
from .autodiff import Tensor
from .spectral import MelConfig, StftConfig, mel_spectrogram_tensor
from .teacher import (
    PseudoLabels,
    StubTeacher,
    TeacherStates,
    TokenDistribution,
    default_teacher,
    stub_teacher_decode,
    stub_teacher_encode,
)

SI_SDR_CAP_DB = 100.0
_ERR_FLOOR = 1e-20
PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    lambda_si: float = 0.1
    lambda_soft: float = 1.0
    lambda_hard: float = 1.0
    lambda_kd: float = 0.5

    def __post_init__(self):
        for name, v in asdict(self).items():
            v = float(v)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {"lambda_si", "lambda_soft", "lambda_hard", "lambda_kd"}
        if unknown:
            raise ValueError(f"unknown loss weight fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    if isinstance(w, Tensor):
        return w.data
    return np.asarray(w)


# -- SI-SDR -------------------------------------------------------------------------
def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, clamped to +-100 dB.

    +100 when the residual after projection vanishes; -100 when the
    estimate has no component along the reference.
    """
    r = np.asarray(_samples(ref), dtype=np.float64).reshape(-1)
    e = np.asarray(_samples(est), dtype=np.float64).reshape(-1)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: reference {r.size} vs estimate {e.size}")
    if r.size == 0:
        raise ValueError("SI-SDR of empty signals is undefined")
    rr = float(np.dot(r, r))
    if rr == 0.0:
        raise ValueError("SI-SDR reference is identically zero")
    target = (np.dot(e, r) / rr) * r
    sig = float(np.dot(target, target))
    err = float(np.sum((target - e) ** 2))
    if err < _ERR_FLOOR:
        return SI_SDR_CAP_DB
    if sig < _ERR_FLOOR:
        return -SI_SDR_CAP_DB
    return float(np.clip(10.0 * np.log10(sig / err), -SI_SDR_CAP_DB, SI_SDR_CAP_DB))


def si_sdr_tensor(ref: np.ndarray, est: Tensor) -> Tensor:
    """Per-row SI-SDR (dB) of (B, L) estimates; differentiable through ``est``."""
    r = np.atleast_2d(np.asarray(ref, dtype=est.dtype))
    if r.shape != est.shape:
        raise ValueError(f"shape mismatch: reference {r.shape} vs estimate {est.shape}")
    rr = np.sum(r * r, axis=-1, keepdims=True)
    if np.any(rr == 0):
        raise ValueError("SI-SDR reference is identically zero")
    alpha = ad.tsum(est * Tensor(r), -1, keepdims=True) * Tensor(1.0 / rr)
    target = alpha * Tensor(r)
    sig = ad.tsum(ad.square(target), -1)
    err = ad.tsum(ad.square(target - est), -1)
    s, e = sig.data.astype(np.float64), err.data.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = 10.0 * np.log10(s / e)
    high = (e < _ERR_FLOOR) | (raw >= SI_SDR_CAP_DB)
    low = ~high & ((s < _ERR_FLOOR) | (raw <= -SI_SDR_CAP_DB))
    capped = high | low
    fill = np.where(high, SI_SDR_CAP_DB, -SI_SDR_CAP_DB).astype(est.dtype)
    keep = Tensor((~capped).astype(est.dtype))
    guard = Tensor(capped.astype(est.dtype))
    db = (10.0 / np.log(10.0)) * (ad.log(sig + guard) - ad.log(err + guard))
    out = db * keep + Tensor(np.where(capped, fill, 0).astype(est.dtype))
    return out


# -- audio enhancement ----------------------------------------------------------------
def _as_batch_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.ndim == 2 else ad.reshape(x, (1, -1))
    return Tensor(np.atleast_2d(_samples(x)))


def mel_mse(clean, enhanced, stft_cfg: StftConfig | None = None, mel_cfg: MelConfig | None = None) -> Tensor:
    est = _as_batch_tensor(enhanced)
    ref = np.atleast_2d(_samples(clean)).astype(est.dtype)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch: clean {ref.shape} vs enhanced {est.shape}")
    with ad.no_grad():
        target = mel_spectrogram_tensor(Tensor(ref), stft_cfg, mel_cfg).data
    diff = mel_spectrogram_tensor(est, stft_cfg, mel_cfg) - Tensor(target)
    return ad.mean(ad.square(diff))


def l_ae(clean, enhanced, weights: LossWeights | None = None,
         stft_cfg: StftConfig | None = None, mel_cfg: MelConfig | None = None) -> Tensor:
    weights = weights or LossWeights()
    est = _as_batch_tensor(enhanced)
    loss = mel_mse(clean, est, stft_cfg, mel_cfg)
    if weights.lambda_si:
        ref = np.atleast_2d(_samples(clean))
        loss = loss - weights.lambda_si * ad.mean(si_sdr_tensor(ref, est))
    return loss


# -- distillation ----------------------------------------------------------------------
def l_hard(dist: TokenDistribution, labels: PseudoLabels) -> Tensor:
    """Mean negative log-likelihood of the pseudo-labels."""
    if not isinstance(labels, PseudoLabels):
        labels = PseudoLabels(labels)
    b, n, _ = dist.probs.shape
    tok = labels.tokens
    if tok.shape[1] != n or tok.shape[0] not in (1, b):
        raise ValueError(f"labels of shape {tok.shape} do not match distribution positions ({b}, {n})")
    tok = np.broadcast_to(tok, (b, n))
    bi, ni = np.meshgrid(np.arange(b), np.arange(n), indexing="ij")
    picked = dist.probs[bi, ni, tok]
    return -ad.mean(ad.log(picked + PROB_FLOOR))


def l_soft(teacher: TokenDistribution, student: TokenDistribution) -> Tensor:
    """Mean over positions of KL(teacher || student); gradients flow to the student only."""
    if teacher.probs.shape != student.probs.shape:
        raise ValueError(f"shape mismatch: teacher {teacher.probs.shape} vs student {student.probs.shape}")
    q = teacher.probs.data.astype(student.probs.dtype)
    q_log_q = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    cross = ad.tsum(Tensor(q) * ad.log(ad.clip_min(student.probs, PROB_FLOOR)), -1)
    per_pos = Tensor(q_log_q.sum(axis=-1)) - cross
    return ad.mean(per_pos)


def l_kd(soft, hard, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    return weights.lambda_soft * soft + weights.lambda_hard * hard


def l_total(ae, kd, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    return ae + weights.lambda_kd * kd


def distillation_terms(clean, enhanced: Tensor, teacher: StubTeacher | None = None,
                       labels: PseudoLabels | None = None) -> tuple:
    """(soft, hard, labels) for a batch; labels default to the teacher's greedy decode of ``clean``."""
    teacher = teacher or default_teacher()
    est = _as_batch_tensor(enhanced)
    with ad.no_grad():
        clean_states = teacher.encode(np.atleast_2d(_samples(clean)))
        if labels is None:
            labels = PseudoLabels(teacher.greedy(clean_states))
        q = teacher.decode(clean_states, labels)
    p = teacher.decode(teacher.encode(est), labels)
    return l_soft(q, p), l_hard(p, labels), labels


__all__ = [
    "LossWeights",
    "PseudoLabels",
    "TeacherStates",
    "TokenDistribution",
    "distillation_terms",
    "l_ae",
    "l_hard",
    "l_kd",
    "l_soft",
    "l_total",
    "mel_mse",
    "si_sdr",
    "si_sdr_tensor",
    "stub_teacher_decode",
    "stub_teacher_encode",
]
