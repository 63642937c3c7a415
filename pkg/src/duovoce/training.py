"""Training loop: batch, forward, enhancement + distillation loss, backward, SGD."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import CorpusManifest, MixSpec, _rng, build_training_batch, noise_bank
from .ddccrn import DdccrnConfig, DdccrnModel, build, enhance_tensor, toy_config
from .losses import LossWeights, distillation_terms, l_ae, l_kd, l_total
from .teacher import PseudoLabels


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: DdccrnConfig = field(default_factory=toy_config)
    weights: LossWeights = field(default_factory=LossWeights)
    steps: int = 500
    batch_size: int = 4
    lr: float = 0.05
    seed: int = 0
    manifest_path: str = "manifest.jsonl"
    checkpoint_out: str = "model.dvck"
    segment_samples: int | None = 8000
    clip_norm: float | None = 5.0
    level_range: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DdccrnConfig.from_dict(self.model)
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.steps, bool) or not isinstance(self.steps, int) or self.steps < 1:
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size!r}")
        if not (isinstance(self.lr, (int, float)) and np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be > 0, got {self.lr!r}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.segment_samples is not None and self.segment_samples < self.model.stft.win_length:
            raise ConfigError("segment_samples must cover at least one STFT frame")
        lo, hi = self.level_range
        if not lo <= hi:
            raise ConfigError(f"level_range must be ordered, got {self.level_range}")
        self.level_range = (float(lo), float(hi))

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        d = dict(d)
        if base_dir is not None:
            for key in ("manifest_path", "checkpoint_out"):
                if key in d and not Path(d[key]).is_absolute():
                    d[key] = str(Path(base_dir) / d[key])
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "weights": self.weights.to_dict(),
            "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr, "seed": self.seed,
            "manifest_path": self.manifest_path, "checkpoint_out": self.checkpoint_out,
            "segment_samples": self.segment_samples, "clip_norm": self.clip_norm,
            "level_range": list(self.level_range),
        }


@dataclass
class TrainResult:
    model: DdccrnModel
    history: list
    checkpoint: Path | None
    log_path: Path | None


def loss_terms(model: DdccrnModel, batch, weights: LossWeights) -> dict:
    """All loss terms for one batch of equal-length captures."""
    mic = np.stack([c.mic.samples for c in batch.captures])
    vib = np.stack([c.vib.samples for c in batch.captures])
    clean = np.stack([w.samples for w in batch.clean])
    est = enhance_tensor(model, mic, vib)
    ae = l_ae(clean, est, weights, model.config.stft)
    labels = PseudoLabels(np.stack(batch.labels))
    soft, hard, _ = distillation_terms(clean, est, labels=labels)
    kd = l_kd(soft, hard, weights)
    total = l_total(ae, kd, weights)
    return {"total": total, "ae": ae, "kd": kd, "soft": soft, "hard": hard}


def train(cfg: TrainConfig, manifest: CorpusManifest | None = None, *, log_path=None,
          save: bool = True, progress=None) -> TrainResult:
    """Run the loop; raises DivergenceError on a non-finite loss."""
    manifest = manifest or CorpusManifest.read(cfg.manifest_path)
    if cfg.segment_samples is None and cfg.batch_size > 1:
        lengths = {len(manifest.clean(uid)) for uid in manifest.ids}
        if len(lengths) > 1:
            raise ConfigError("uncropped batches need equal utterance lengths; set segment_samples")
    model = build(cfg.model, seed=int(_rng("init", cfg.seed).integers(2**31)))
    params = model.parameters()
    bank = noise_bank(cfg.seed)
    rng = _rng("train", cfg.seed)
    cache: dict = {}
    history = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.steps):
            ids = [manifest.ids[i] for i in rng.choice(len(manifest), cfg.batch_size, replace=False)] \
                if cfg.batch_size <= len(manifest) else [manifest.ids[i] for i in rng.integers(len(manifest), size=cfg.batch_size)]
            level = float(rng.uniform(*cfg.level_range))
            spec = MixSpec(level, int(rng.integers(2**31)))
            batch = build_training_batch(manifest, ids, spec, crop=cfg.segment_samples, bank=bank, cache=cache)
            t0 = time.perf_counter()
            terms = loss_terms(model, batch, cfg.weights)
            values = {k: float(v.data) for k, v in terms.items()}
            if not all(np.isfinite(v) for v in values.values()):
                raise DivergenceError(f"non-finite loss at step {step}: {values}")
            terms["total"].backward()
            norm = ad.clip_grad_norm(params, cfg.clip_norm) if cfg.clip_norm else ad.grad_norm(params)
            if not np.isfinite(norm):
                raise DivergenceError(f"non-finite gradient norm at step {step}")
            ad.sgd_step(params, cfg.lr)
            rec = {"step": step, "level_db": level, **values, "grad_norm": norm,
                   "seconds": round(time.perf_counter() - t0, 4)}
            history.append(rec)
            if log_file:
                # timing varies run to run, so it stays out of the deterministic log
                log_file.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
            if progress:
                progress(rec)
    finally:
        if log_file:
            log_file.close()
    ckpt = None
    if save:
        ckpt = Path(cfg.checkpoint_out)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        model.save(ckpt)
    return TrainResult(model, history, ckpt, Path(log_path) if log_path else None)


def loss_curve_csv(history: list) -> str:
    cols = ["step", "total", "ae", "kd", "soft", "hard", "grad_norm"]
    lines = [",".join(cols)]
    for rec in history:
        lines.append(",".join(str(rec[c]) if c == "step" else f"{rec[c]:.6g}" for c in cols))
    return "\n".join(lines) + "\n"
