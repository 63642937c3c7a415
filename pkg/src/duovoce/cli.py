"""Command-line entry point.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or config error,
3 numerical divergence during training, 4 gradient verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4
SEED_ENV = "DUOVOCE_SEED"


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _levels(text: str) -> list:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("at least one level is required")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers, got {text!r}") from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# -- commands ---------------------------------------------------------------------------
def cmd_gen_corpus(args) -> int:
    from .dataset import gen_toy_corpus

    seed = args.seed if args.seed is not None else default_seed()
    manifest = gen_toy_corpus(args.n, seed, args.out, jobs=args.jobs)
    print(Path(args.out) / "manifest.jsonl")
    return EXIT_OK if len(manifest) == args.n else EXIT_RUNTIME


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve
    from .training import ConfigError, DivergenceError, TrainConfig, loss_curve_csv, train

    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw:
        raw["seed"] = default_seed()
    try:
        cfg = TrainConfig.from_dict(raw, base_dir=Path(args.config).parent)
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    ckpt = Path(cfg.checkpoint_out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = ckpt.parent / (ckpt.name + ".log.jsonl")

    def progress(rec):
        if not args.quiet and (rec["step"] % 25 == 0 or rec["step"] == cfg.steps - 1):
            print(f"step {rec['step']:5d}  total {rec['total']:.4f}  ae {rec['ae']:.4f}  kd {rec['kd']:.4f}",
                  file=sys.stderr)

    try:
        result = train(cfg, log_path=log_path, progress=progress)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    curve_csv = ckpt.parent / (ckpt.name + ".loss.csv")
    curve_csv.write_text(loss_curve_csv(result.history))
    curve_png = plot_loss_curve(result.history, ckpt.parent / (ckpt.name + ".loss.png"))
    print(json.dumps({"checkpoint": str(ckpt), "log": str(log_path), "loss_csv": str(curve_csv),
                      "loss_png": str(curve_png), "final_total": result.history[-1]["total"]}))
    return EXIT_OK


def _load_model(path):
    from .ddccrn import DdccrnModel

    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return DdccrnModel.load(path)


def cmd_enhance(args) -> int:
    from .ddccrn import enhance_file

    model = _load_model(args.model)
    print(json.dumps(enhance_file(model, args.inp, args.out)))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import MODES, CorpusManifest
    from .metrics import evaluate
    from .plotting import plot_report

    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    if not modes or any(m not in MODES for m in modes):
        raise UsageError(f"--modes must be a comma-separated subset of {','.join(MODES)}")
    seed = args.seed if args.seed is not None else default_seed()
    model = _load_model(args.model)
    manifest = CorpusManifest.read(args.manifest)
    report = evaluate(manifest, model, args.levels, modes, seed, jobs=args.jobs)
    paths = report.write(args.out)
    if not args.no_plot:
        paths["png"] = plot_report(report, Path(args.out).with_suffix(".png"))
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import THRESHOLD, run

    results = run(args.module, seed=args.seed if args.seed is not None else default_seed(),
                  report=lambda r: print(f"{r.module:16s} {r.op:28s} max_rel_err={r.error:.3e} "
                                         f"{'ok' if r.ok else 'FAIL'}"))
    failures = [r for r in results if not r.ok]
    worst = max(r.error for r in results)
    print(f"max relative error {worst:.3e} over {len(results)} checks (threshold {THRESHOLD:g})")
    if failures:
        for r in failures:
            print(f"error: gradient check failed for {r.module}.{r.op}: relative error {r.error:.3e}",
                  file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_spectrogram(args) -> int:
    from .audio_io import read_capture, read_wav
    from .spectral import mel_spectrogram

    if args.channel == "mono":
        w = read_wav(args.inp)
    else:
        cap = read_capture(args.inp)
        w = cap.mic if args.channel == "mic" else cap.vib
    logmel = mel_spectrogram(w)  # (frames, mels)
    base = Path(args.out)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.parent / (base.name + ".csv")
    np.savetxt(csv_path, logmel, delimiter=",", fmt="%.6f")
    pgm_path = base.parent / (base.name + ".pgm")
    write_pgm(logmel, pgm_path)
    out = {"csv": str(csv_path), "pgm": str(pgm_path), "frames": logmel.shape[0], "mels": logmel.shape[1]}
    if args.png:
        from .plotting import plot_logmel

        out["png"] = str(plot_logmel(logmel, base.parent / (base.name + ".png")))
    print(json.dumps(out))
    return EXIT_OK


def write_pgm(matrix: np.ndarray, path):
    """8-bit binary PGM; one image row per matrix row."""
    lo, hi = float(matrix.min()), float(matrix.max())
    scaled = np.zeros(matrix.shape) if hi == lo else (matrix - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# -- parser ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duovoce", description="Dual-sensor speech enhancement toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic dual-sensor corpus")
    g.add_argument("--n", type=_positive_int, required=True, help="number of utterances")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=_positive_int, default=1)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train", help="train a model from a TrainConfig JSON")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a stereo (vib, mic) capture")
    e.add_argument("--model", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="score a model over noise levels")
    v.add_argument("--model", required=True)
    v.add_argument("--manifest", required=True)
    v.add_argument("--levels", type=_levels, default=[-20.0, -10.0, 0.0, 10.0])
    v.add_argument("--modes", default="normal,whisper")
    v.add_argument("--out", required=True, help="report base path; .json, .csv and .png are written")
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--jobs", type=_positive_int, default=1)
    v.add_argument("--no-plot", action="store_true")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="run the gradient oracle suite")
    c.add_argument("--module", default="all",
                   choices=["all", "tensor_autodiff", "spectral", "complex_nn", "ddccrn", "losses"])
    c.add_argument("--seed", type=int, default=None)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("spectrogram", help="write a log-mel spectrogram as CSV and PGM")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--channel", choices=["mic", "vib", "mono"], default="mono")
    s.add_argument("--out", required=True, help="base path; .csv and .pgm are written")
    s.add_argument("--png", action="store_true", help="also render a PNG figure")
    s.set_defaults(func=cmd_spectrogram)
    return p


def _join_negative_values(argv: list) -> list:
    # "--levels -20,-10" would otherwise read as an unknown option
    out = []
    it = iter(argv)
    for a in it:
        if a == "--levels":
            nxt = next(it, None)
            out.append(a if nxt is None else f"--levels={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # every other failure is a runtime error with exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
