"""Objective scores (SI-SDR, STOI, WER, CER) and the evaluation report."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .audio_io import SAMPLE_RATE, DualCapture, Waveform
from .dataset import MODES, MixSpec, _rng, mix_noise, noise_bank, simulate_vib, utterance_seed
from .losses import si_sdr
from .teacher import default_teacher

# STOI constants of the published algorithm
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0

CHANNELS = ("mic", "vib", "enhanced")
GRID_METRICS = ("si_sdr_db", "stoi", "wer")


class SignalTooShortError(ValueError):
    pass


def _hann(n: int) -> np.ndarray:
    # symmetric Hann without the zero end points
    return np.hanning(n + 2)[1:-1]


def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _frame_starts(n: int, frame: int, hop: int) -> np.ndarray:
    return np.arange(0, n - frame, hop)


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = STOI_DYN_RANGE_DB,
                         frame: int = STOI_FRAME, hop: int = STOI_FRAME // 2) -> tuple:
    """Drop frames of ``x`` more than ``dyn_range`` dB below its loudest frame; same frames from ``y``."""
    w = _hann(frame)
    starts = _frame_starts(len(x), frame, hop)
    if starts.size == 0:
        raise SignalTooShortError("signal shorter than one analysis frame")
    idx = starts[:, None] + np.arange(frame)
    xf, yf = x[idx] * w, y[idx] * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n_out = (len(xf) - 1) * hop + frame
    xs, ys = np.zeros(n_out), np.zeros(n_out)
    for j in range(len(xf)):
        xs[j * hop : j * hop + frame] += xf[j]
        ys[j * hop : j * hop + frame] += yf[j]
    return xs, ys


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = _hann(STOI_FRAME)
    starts = _frame_starts(len(x), STOI_FRAME, STOI_FRAME // 2)
    frames = x[starts[:, None] + np.arange(STOI_FRAME)] * w
    spec = np.abs(np.fft.rfft(frames, STOI_NFFT, axis=1)) ** 2  # (frames, bins)
    return np.sqrt(spec @ obm.T).T  # (bands, frames)


def stoi(clean, processed, fs: int = SAMPLE_RATE) -> float:
    x = np.asarray(clean.samples if isinstance(clean, Waveform) else clean, dtype=np.float64)
    y = np.asarray(processed.samples if isinstance(processed, Waveform) else processed, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: clean {x.size} vs processed {y.size}")
    if fs != STOI_FS:
        g = np.gcd(fs, STOI_FS)
        x = resample_poly(x, STOI_FS // g, fs // g)
        y = resample_poly(y, STOI_FS // g, fs // g)
    x, y = remove_silent_frames(x, y)
    obm = third_octave_matrix()
    xe, ye = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n_frames = xe.shape[1]
    if n_frames < STOI_SEGMENT:
        raise SignalTooShortError(
            f"{n_frames} non-silent frames; STOI needs at least {STOI_SEGMENT} (about 384 ms of speech)")
    eps = np.finfo(float).eps
    clip = 10 ** (-STOI_BETA_DB / 20)
    win = np.lib.stride_tricks.sliding_window_view
    xs = win(xe, STOI_SEGMENT, axis=1)  # (bands, segments, N)
    ys = win(ye, STOI_SEGMENT, axis=1)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + eps)
    yp = np.minimum(ys * alpha, xs * (1 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + eps
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + eps
    return float(np.mean(np.sum(xc * yc, axis=2)))


# -- error rates -------------------------------------------------------------------
def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit costs."""
    ref, hyp = list(ref), list(hyp)
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        prev, row = row, [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            row[j] = min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (r != h))
    return row[-1]


def wer(ref, hyp) -> float:
    ref = list(ref)
    if not ref:
        raise ValueError("error rate of an empty reference is undefined")
    return edit_distance(ref, hyp) / len(ref)


def cer(ref, hyp) -> float:
    return wer(ref, hyp)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def token_text(tokens) -> str:
    """Spell tokens with a fixed consonant-vowel syllable lexicon so CER can be scored."""
    out = []
    for t in tokens:
        t = int(t)
        c = _CONSONANTS[t % len(_CONSONANTS)]
        v = _VOWELS[(t // len(_CONSONANTS)) % len(_VOWELS)]
        out.append(c + v + ("" if t < len(_CONSONANTS) * len(_VOWELS) else "n"))
    return "".join(out)


def token_cer(ref_tokens, hyp_tokens) -> float:
    return cer(token_text(ref_tokens), token_text(hyp_tokens))


# -- report ------------------------------------------------------------------------
@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    pesq: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.records:
            if not -1.0 - 1e-9 <= r["stoi"] <= 1.0 + 1e-9:
                raise ValueError(f"stoi out of range in record {r['id']}")
            if r["wer"] < 0 or r["cer"] < 0:
                raise ValueError(f"negative error rate in record {r['id']}")

    def cells(self, channel: str = "enhanced") -> dict:
        out = {}
        for r in self.records:
            if r["channel"] == channel:
                out.setdefault((r["mode"], r["level_db"]), []).append(r)
        return out

    def aggregates(self, channel: str = "enhanced") -> dict:
        metrics = ("si_sdr_db", "stoi", "wer", "cer")
        agg = {}
        for key, rows in sorted(self.cells(channel).items()):
            agg[key] = {m: float(np.mean([r[m] for r in rows])) for m in metrics}
            agg[key]["n"] = len(rows)
        return agg

    def mean(self, metric: str, channel: str, level_db=None, mode=None) -> float:
        vals = [r[metric] for r in self.records if r["channel"] == channel
                and (level_db is None or r["level_db"] == level_db) and (mode is None or r["mode"] == mode)]
        if not vals:
            raise KeyError(f"no records for channel={channel} level={level_db} mode={mode}")
        return float(np.mean(vals))

    @property
    def levels(self) -> list:
        return sorted({r["level_db"] for r in self.records})

    @property
    def modes(self) -> list:
        present = {r["mode"] for r in self.records}
        return [m for m in MODES if m in present]

    def to_json(self) -> str:
        agg = {ch: [{"mode": k[0], "level_db": k[1], **v} for k, v in self.aggregates(ch).items()]
               for ch in sorted({r["channel"] for r in self.records})}
        return json.dumps({"records": self.records, "aggregates": agg, "pesq": self.pesq or None}, indent=2)

    def grid_csv(self, channel: str = "enhanced") -> str:
        """Rows = level_db, columns = metric x mode."""
        agg = self.aggregates(channel)
        cols = [f"{m}_{mode}" for m in GRID_METRICS for mode in self.modes]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level_db"] + cols)
        for level in self.levels:
            row = [level]
            for m in GRID_METRICS:
                for mode in self.modes:
                    cell = agg.get((mode, level))
                    row.append(f"{cell[m]:.6f}" if cell else "")
            w.writerow(row)
        return buf.getvalue()

    def long_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "mode", "level_db", "n", "si_sdr_db", "stoi", "wer", "cer"])
        for ch in CHANNELS:
            for (mode, level), v in self.aggregates(ch).items():
                w.writerow([ch, mode, level, v["n"]] + [f"{v[m]:.6f}" for m in ("si_sdr_db", "stoi", "wer", "cer")])
        return buf.getvalue()

    def write(self, base) -> dict:
        base = Path(base)
        base.parent.mkdir(parents=True, exist_ok=True)
        paths = {"json": base.with_suffix(".json"), "csv": base.with_suffix(".csv"),
                 "long_csv": base.parent / (base.name + "_long.csv")}
        paths["json"].write_text(self.to_json())
        paths["csv"].write_text(self.grid_csv())
        paths["long_csv"].write_text(self.long_csv())
        return paths


# -- evaluation --------------------------------------------------------------------
def _score(uid, mode, level, channel, clean, processed, ref_tokens, teacher) -> dict:
    hyp = teacher.transcribe(processed)
    return {
        "id": uid, "mode": mode, "level_db": float(level), "channel": channel,
        "si_sdr_db": si_sdr(clean.samples, processed.samples),
        "stoi": stoi(clean, processed),
        "wer": wer(ref_tokens, hyp),
        "cer": token_cer(ref_tokens, hyp),
    }


def _evaluate_one(args) -> list:
    manifest, uid, model, levels, seed, enhance_fn, channels = args
    from .ddccrn import forward  # deferred: ddccrn imports are heavier than the scoring path

    teacher = default_teacher()
    entry = manifest[uid]
    clean = manifest.clean(uid)
    vib = simulate_vib(clean, entry.mode, seed=utterance_seed(0, uid))
    bank = noise_bank(seed)
    ref = teacher.transcribe(clean)
    rows = []
    for level in levels:
        rng = _rng("eval", seed, uid, float(level))
        noise = bank[int(rng.integers(len(bank)))]
        mic = mix_noise(clean, noise, MixSpec(float(level), int(rng.integers(2**31))))
        capture = DualCapture(vib=vib, mic=mic)
        for ch in channels:
            if ch == "mic":
                out = mic
            elif ch == "vib":
                out = vib
            else:
                out = enhance_fn(capture, clean) if enhance_fn is not None else forward(model, capture)
            rows.append(_score(uid, entry.mode, level, ch, clean, out, ref, teacher))
    return rows


def evaluate(manifest, model=None, levels=(-20, -10, 0, 10), modes=MODES, seed: int = 0, *,
             enhance_fn=None, ids=None, channels=CHANNELS, jobs: int = 1) -> MetricsReport:
    """Score every (utterance, level) cell on the requested channels.

    ``enhance_fn(capture, clean) -> Waveform`` replaces the model, for bypass
    baselines and tests.
    """
    levels = list(levels)
    if not levels:
        raise ValueError("at least one level is required")
    if model is None and enhance_fn is None and "enhanced" in channels:
        raise ValueError("evaluate needs a model or an enhance_fn for the enhanced channel")
    ids = [e.id for e in manifest.entries if e.mode in modes] if ids is None else list(ids)
    tasks = [(manifest, uid, model, levels, seed, enhance_fn, tuple(channels)) for uid in ids]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            chunks = list(pool.map(_evaluate_one, tasks))
    else:
        chunks = [_evaluate_one(t) for t in tasks]
    return MetricsReport([r for chunk in chunks for r in chunk])
