"""Synthetic dual-sensor corpus and the noise-mixing protocol.

Noise levels are noise RMS relative to clean RMS in dB: +10 is a louder
noise than -10. The vibration channel is simulated from the clean signal
(band-limited, attenuated, with a sensor noise floor) and never sees the
acoustic noise.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, firwin, lfilter

from .audio_io import SAMPLE_RATE, DualCapture, Waveform, read_wav, require_rate, rms, write_wav
from .teacher import default_teacher

MODES = ("normal", "whisper")
VIB_BAND_HZ = (10.0, 2000.0)
VIB_TAPS = 1025
VIB_GAIN_DB = -6.0
WHISPER_EXTRA_DB = -12.0
SENSOR_FLOOR_DB = -50.0
NOISE_BANK_SIZE = 8
NOISE_BANK_SECONDS = 4.0


class SilentSignalError(ValueError):
    pass


def _rng(*keys) -> np.random.Generator:
    """Independent stream for a tuple of ints/strings."""
    digest = hashlib.sha256(repr(keys).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class MixSpec:
    level_db: float | None = 0.0
    seed: int = 0
    noise_offset_policy: str = "random_tile"

    def __post_init__(self):
        if self.level_db is not None and not np.isfinite(self.level_db):
            raise ValueError(f"level_db must be finite, got {self.level_db}")
        if self.noise_offset_policy != "random_tile":
            raise ValueError(f"unknown noise offset policy {self.noise_offset_policy!r}")


# -- mixing ---------------------------------------------------------------------------
def mix_noise(clean: Waveform, noise: Waveform, spec: MixSpec) -> Waveform:
    """clean + noise, the noise tiled from a seeded offset and scaled to the requested level."""
    c = clean.samples.astype(np.float64)
    n = noise.samples.astype(np.float64)
    rc, rn = rms(c), rms(n)
    if rc == 0.0:
        raise SilentSignalError("clean signal is silent; its RMS is zero")
    if rn == 0.0:
        raise SilentSignalError("noise signal is silent; its RMS is zero")
    if spec.level_db is None:
        raise ValueError("mix_noise needs a concrete level_db")
    offset = int(_rng("offset", spec.seed, len(n)).integers(len(n)))
    reps = int(np.ceil((offset + len(c)) / len(n)))
    seg = np.tile(n, reps)[offset : offset + len(c)]
    rs = rms(seg)
    if rs == 0.0:
        raise SilentSignalError("the selected noise segment is silent")
    scaled = seg * (rc * 10.0 ** (spec.level_db / 20.0) / rs)
    return Waveform(c + scaled, clean.sample_rate_hz)


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    spec = spec / np.sqrt(f)
    spec[0] = 0.0
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def babble_noise(n: int, rng: np.random.Generator, fs: int = SAMPLE_RATE, talkers: int = 6) -> np.ndarray:
    """Sum of amplitude-modulated harmonic complexes with drifting pitch."""
    t = np.arange(n) / fs
    out = np.zeros(n)
    for _ in range(talkers):
        f0 = rng.uniform(90, 240) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 6.3)))
        phase = 2 * np.pi * np.cumsum(f0) / fs
        voice = np.zeros(n)
        for h in range(1, 25):
            if np.max(f0) * h > fs / 2 - 200:
                break
            voice += rng.uniform(0.2, 1.0) / h * np.sin(h * phase + rng.uniform(0, 6.3))
        env = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 6.3)))
        out += voice * env
    return out / (np.std(out) + 1e-12)


@lru_cache(maxsize=8)
def noise_bank(seed: int, n_clips: int = NOISE_BANK_SIZE, seconds: float = NOISE_BANK_SECONDS) -> tuple:
    """Alternating pink and babble clips, deterministic in ``seed``."""
    n = int(seconds * SAMPLE_RATE)
    clips = []
    for k in range(n_clips):
        rng = _rng("noise", seed, k)
        x = pink_noise(n, rng) if k % 2 == 0 else babble_noise(n, rng)
        clips.append(Waveform((0.1 * x).astype(np.float32)))
    return tuple(clips)


# -- vibration channel ------------------------------------------------------------------
@lru_cache(maxsize=1)
def vib_filter() -> np.ndarray:
    """Linear-phase band-pass FIR with its DC response forced to zero."""
    h = firwin(VIB_TAPS, VIB_BAND_HZ, pass_zero=False, fs=SAMPLE_RATE, window="blackman")
    w = np.blackman(VIB_TAPS)
    return h - w * (h.sum() / w.sum())


def bandpass_vib(x: np.ndarray) -> np.ndarray:
    h = vib_filter()
    half = len(h) // 2
    padded = np.pad(np.asarray(x, dtype=np.float64), half, mode="reflect" if len(x) > half else "symmetric")
    return fftconvolve(padded, h, mode="valid")


def simulate_vib(clean: Waveform, mode: str = "normal", seed: int = 0) -> Waveform:
    require_rate(clean)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    gain_db = VIB_GAIN_DB + (WHISPER_EXTRA_DB if mode == "whisper" else 0.0)
    y = bandpass_vib(clean.samples) * 10.0 ** (gain_db / 20.0)
    floor = rms(clean) * 10.0 ** (SENSOR_FLOOR_DB / 20.0)
    y = y + floor * _rng("vib", seed).standard_normal(len(y))
    return Waveform(y.astype(np.float32), clean.sample_rate_hz)


# -- toy speech ---------------------------------------------------------------------------
def _resonator_coeffs(freq, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - 2 * r * np.cos(theta) + r * r]  # unity gain at DC
    return b, a


def _formant_filter(x: np.ndarray, tracks: list, fs: int, block: int = 160) -> np.ndarray:
    """Cascade of time-varying resonators; coefficients change every ``block`` samples."""
    y = np.asarray(x, dtype=np.float64)
    for freqs, bws in tracks:
        out = np.empty_like(y)
        zi = np.zeros(2)
        for s in range(0, len(y), block):
            k = min(s // block, len(freqs) - 1)
            b, a = _resonator_coeffs(freqs[k], bws[k], fs)
            out[s : s + block], zi = lfilter(b, a, y[s : s + block], zi=zi)
        y = out
    return y


def synth_utterance(mode: str, rng: np.random.Generator, fs: int = SAMPLE_RATE) -> tuple:
    """Returns (samples, mean pitch in Hz or None) for one 1-3 s utterance."""
    n = int(rng.uniform(1.0, 3.0) * fs)
    t = np.arange(n) / fs
    n_blocks = n // 160 + 1
    tb = np.arange(n_blocks) * 160 / fs
    n_formants = int(rng.integers(2, 4))
    tracks = []
    for k in range(n_formants):
        centre = rng.uniform(*[(300, 900), (900, 2200), (2200, 3500)][k])
        wobble = 1 + 0.25 * np.sin(2 * np.pi * rng.uniform(0.5, 2.5) * tb + rng.uniform(0, 6.3))
        bw = rng.uniform(150, 260) * np.ones(n_blocks)
        tracks.append((centre * wobble, bw))
    pitch = None
    if mode == "normal":
        pitch = rng.uniform(95, 220)
        f0 = pitch * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 6.3)))
        phase = np.cumsum(f0) / fs
        excitation = np.diff(np.floor(phase), prepend=0.0) * 1.0
        excitation = excitation - excitation.mean()
        excitation = lfilter([1.0], [1.0, -0.9], excitation)  # glottal tilt
    else:
        excitation = rng.standard_normal(n) * 0.1
    y = _formant_filter(excitation, tracks, fs)
    syll_rate = rng.uniform(2.5, 5.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * syll_rate * t + rng.uniform(0, 6.3))
    ramp = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.05)
    y = y * env * ramp
    y = y * (rng.uniform(0.05, 0.2) / (rms(y) + 1e-12))
    peak = np.max(np.abs(y))
    if peak > 0.95:
        y *= 0.95 / peak
    return y.astype(np.float32), pitch


# -- corpus ------------------------------------------------------------------------------
@dataclass
class ManifestEntry:
    id: str
    clean_path: str
    vib_path: str
    noisy_path: str
    mode: str
    level_db: float
    transcript_tokens: list = field(default_factory=list)


@dataclass
class CorpusManifest:
    entries: list
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")
        self._by_id = {e.id: e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, key) -> ManifestEntry:
        try:
            return self._by_id[key]
        except KeyError:
            raise KeyError(f"id {key!r} not in manifest") from None

    @property
    def ids(self) -> list:
        return [e.id for e in self.entries]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def clean(self, key) -> Waveform:
        return read_wav(self.path(self[key].clean_path))

    def vib(self, key) -> Waveform:
        return read_wav(self.path(self[key].vib_path))

    def write(self, path):
        path = Path(path)
        lines = [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path, check_files: bool = True) -> "CorpusManifest":
        path = Path(path)
        entries = []
        for no, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{no}: bad manifest entry ({exc})") from None
        manifest = cls(entries, path.parent)
        if check_files:
            for e in entries:
                for rel in (e.clean_path, e.vib_path, e.noisy_path):
                    if not manifest.path(rel).exists():
                        raise FileNotFoundError(f"{path}: entry {e.id} references missing file {rel}")
        return manifest


def _gen_one(args) -> ManifestEntry:
    i, seed, out_dir = args
    uid = f"utt{i:05d}"
    mode = MODES[i % 2]
    rng = _rng("utt", seed, uid)
    samples, _ = synth_utterance(mode, rng)
    clean = Waveform(samples)
    vib = simulate_vib(clean, mode, seed=utterance_seed(0, uid))
    level = float(np.round(rng.uniform(-10.0, 10.0), 3))
    bank = noise_bank(seed)
    noise = bank[int(rng.integers(len(bank)))]
    noisy = mix_noise(clean, noise, MixSpec(level, int(rng.integers(2**31))))
    rel = {k: f"{k}/{uid}.wav" for k in ("clean", "vib", "noisy")}
    write_wav(clean, out_dir / rel["clean"])
    write_wav(vib, out_dir / rel["vib"])
    write_wav(DualCapture(vib=vib, mic=noisy), out_dir / rel["noisy"])
    # transcripts come from the file as stored, so they match what readers of the corpus see
    tokens = default_teacher().transcribe(read_wav(out_dir / rel["clean"]))
    return ManifestEntry(uid, rel["clean"], rel["vib"], rel["noisy"], mode, level, [int(t) for t in tokens])


def gen_toy_corpus(n_utterances: int, seed: int, out_dir, jobs: int = 1) -> CorpusManifest:
    """Write clean / vib / noisy WAVs and ``manifest.jsonl``; modes alternate normal, whisper."""
    if n_utterances < 1:
        raise ValueError(f"need at least one utterance, got {n_utterances}")
    out_dir = Path(out_dir)
    for sub in ("clean", "vib", "noisy"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    tasks = [(i, seed, out_dir) for i in range(n_utterances)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            entries = list(pool.map(_gen_one, tasks))
    else:
        entries = [_gen_one(t) for t in tasks]
    manifest = CorpusManifest(entries, out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    return manifest


# -- batches ------------------------------------------------------------------------------
@dataclass
class TrainingBatch:
    captures: list
    clean: list
    labels: list
    ids: list


def utterance_seed(spec_seed: int, uid: str) -> int:
    return int(_rng("vibseed", spec_seed, uid).integers(2**31))


def build_training_batch(manifest: CorpusManifest, ids, spec: MixSpec, *, crop: int | None = None,
                         bank: tuple | None = None, cache: dict | None = None) -> TrainingBatch:
    """Noisy captures, clean targets and pseudo-labels for ``ids``.

    ``spec.level_db`` of None takes each entry's own level. With ``crop``, a
    seeded window of that many samples is cut from each utterance and the
    pseudo-labels are re-decoded from the cropped clean signal.
    """
    bank = bank if bank is not None else noise_bank(spec.seed)
    teacher = default_teacher()
    captures, cleans, labels = [], [], []
    for k, uid in enumerate(ids):
        entry = manifest[uid]
        key = (uid,)
        if cache is not None and key in cache:
            clean, vib = cache[key]
        else:
            clean = manifest.clean(uid)
            vib = simulate_vib(clean, entry.mode, seed=utterance_seed(0, uid))
            if cache is not None:
                cache[key] = (clean, vib)
        rng = _rng("batch", spec.seed, uid, k)
        if crop is not None and crop < len(clean):
            start = int(rng.integers(len(clean) - crop + 1))
            clean = Waveform(clean.samples[start : start + crop])
            vib = Waveform(vib.samples[start : start + crop])
        level = entry.level_db if spec.level_db is None else spec.level_db
        noise = bank[int(rng.integers(len(bank)))]
        mic = mix_noise(clean, noise, MixSpec(level, int(rng.integers(2**31))))
        captures.append(DualCapture(vib=vib, mic=mic))
        cleans.append(clean)
        if crop is None:
            labels.append(np.asarray(entry.transcript_tokens, dtype=np.int64))
        else:
            labels.append(teacher.transcribe(clean))
    return TrainingBatch(captures, cleans, labels, list(ids))


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(x) for x in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
