import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from duovoce import training
from duovoce.audio_io import DualCapture, Waveform, read_wav, write_wav
from duovoce.cli import main, read_pgm
from duovoce.dataset import CorpusManifest
from duovoce.spectral import LOG_EPS, StftConfig


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_config(path, manifest, ckpt, **kw):
    cfg = {"steps": 2, "batch_size": 2, "seed": 0, "manifest_path": str(manifest), "checkpoint_out": str(ckpt)}
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus10):
    d = tmp_path_factory.mktemp("cli_train")
    cfg = write_config(d / "train.json", corpus10.root / "manifest.jsonl", d / "m.dvck")
    assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    return d / "m.dvck"


# -- gen-corpus ----------------------------------------------------------------------
def test_gen_corpus(tmp_path, capsys):
    assert main(["gen-corpus", "--n", "10", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "a" / "manifest.jsonl")
    m = CorpusManifest.read(tmp_path / "a" / "manifest.jsonl")
    modes = [m[uid].mode for uid in m.ids]
    assert len(m) == 10 and modes.count("normal") == 5 and modes.count("whisper") == 5
    assert main(["gen-corpus", "--n", "10", "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_corpus_usage_errors(tmp_path, capsys):
    assert main(["gen-corpus", "--n", "0", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["gen-corpus", "--out", str(tmp_path)]) == 2


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("DUOVOCE_SEED", "3")
    assert main(["gen-corpus", "--n", "2", "--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("DUOVOCE_SEED")
    assert main(["gen-corpus", "--n", "2", "--seed", "3", "--out", str(tmp_path / "flag")]) == 0
    assert main(["gen-corpus", "--n", "2", "--seed", "4", "--out", str(tmp_path / "other")]) == 0
    assert tree_digest(tmp_path / "env") == tree_digest(tmp_path / "flag")
    assert tree_digest(tmp_path / "env") != tree_digest(tmp_path / "other")
    monkeypatch.setenv("DUOVOCE_SEED", "abc")
    assert main(["gen-corpus", "--n", "2", "--out", str(tmp_path / "bad")]) == 2


# -- train ---------------------------------------------------------------------------
def test_train_outputs(trained):
    d = trained.parent
    for suffix in (".log.jsonl", ".loss.csv", ".loss.png"):
        assert (d / (trained.name + suffix)).stat().st_size > 0
    assert (d / "m.dvck.json").exists()
    assert len((d / "m.dvck.log.jsonl").read_text().splitlines()) == 2


def test_train_deterministic(tmp_path, corpus10):
    man = corpus10.root / "manifest.jsonl"
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", man, tmp_path / name / "m.dvck")
        assert main(["train", "--config", str(cfg), "--quiet"]) == 0
    assert (tmp_path / "a/m.dvck").read_bytes() == (tmp_path / "b/m.dvck").read_bytes()


@pytest.mark.parametrize("cfg", [{"steps": 0}, {"lr": -1}, {"unknown": 1}, "[1, 2]", "{oops"])
def test_train_bad_config_exit_2(tmp_path, cfg, capsys):
    p = tmp_path / "bad.json"
    p.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    assert main(["train", "--config", str(p)]) == 2
    assert "error" in capsys.readouterr().err


def test_train_missing_config_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_train_nan_exit_3(tmp_path, corpus10, monkeypatch, capsys):
    real = training.loss_terms

    def poisoned(model, batch, weights):
        terms = real(model, batch, weights)
        terms["total"] = terms["total"] * float("nan")
        return terms

    monkeypatch.setattr(training, "loss_terms", poisoned)
    cfg = write_config(tmp_path / "t.json", corpus10.root / "manifest.jsonl", tmp_path / "m.dvck")
    assert main(["train", "--config", str(cfg), "--quiet"]) == 3
    assert "diverged" in capsys.readouterr().err


# -- enhance -------------------------------------------------------------------------
def test_enhance(trained, corpus10, tmp_path, capsys):
    uid = corpus10.ids[0]
    src = corpus10.path(corpus10[uid].noisy_path)
    out = tmp_path / "enh.wav"
    assert main(["enhance", "--model", str(trained), "--in", str(src), "--out", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["processing_ms"] >= 0
    assert read_wav(out).duration_s == pytest.approx(corpus10.clean(uid).duration_s)


def test_enhance_mono_input_exit_1(trained, tmp_path, capsys):
    mono = tmp_path / "mono.wav"
    write_wav(Waveform(np.zeros(1600)), mono)
    assert main(["enhance", "--model", str(trained), "--in", str(mono), "--out", str(tmp_path / "o.wav")]) == 1
    assert "channel" in capsys.readouterr().err.lower()


def test_enhance_missing_checkpoint_exit_1(tmp_path, corpus10, capsys):
    missing = tmp_path / "absent.dvck"
    src = corpus10.path(corpus10[corpus10.ids[0]].noisy_path)
    assert main(["enhance", "--model", str(missing), "--in", str(src), "--out", str(tmp_path / "o.wav")]) == 1
    assert str(missing) in capsys.readouterr().err


# -- eval ----------------------------------------------------------------------------
def test_eval_grid_and_determinism(trained, tiny_corpus, tmp_path, capsys):
    man = str(tiny_corpus.root / "manifest.jsonl")
    args = ["eval", "--model", str(trained), "--manifest", man, "--levels", "-20,-10,0,10", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    paths = json.loads(capsys.readouterr().out)
    assert set(paths) == {"json", "csv", "long_csv", "png"}
    rows = list(csv.reader(open(tmp_path / "r1.csv")))
    assert len(rows) == 1 + 4 and all(len(r) == 1 + 3 * 2 for r in rows)
    assert [float(r[0]) for r in rows[1:]] == [-20, -10, 0, 10]
    assert main(args + ["--out", str(tmp_path / "r2"), "--no-plot"]) == 0
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    assert not (tmp_path / "r2.png").exists()


@pytest.mark.parametrize("levels", ["", ",", "a,b"])
def test_eval_bad_levels_exit_2(trained, tiny_corpus, tmp_path, levels):
    argv = ["eval", "--model", str(trained), "--manifest", str(tiny_corpus.root / "manifest.jsonl"),
            f"--levels={levels}", "--out", str(tmp_path / "r")]
    assert main(argv) == 2


def test_eval_missing_manifest_exit_1(trained, tmp_path):
    assert main(["eval", "--model", str(trained), "--manifest", str(tmp_path / "none.jsonl"),
                 "--out", str(tmp_path / "r")]) == 1


# -- gradcheck -----------------------------------------------------------------------
def test_gradcheck_all_ok(capsys):
    assert main(["gradcheck", "--module", "all", "--seed", "0"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_broken_op_exit_4(broken_tanh, capsys):
    assert main(["gradcheck", "--module", "tensor_autodiff"]) == 4
    err = capsys.readouterr().err
    assert "tensor_autodiff.tanh" in err and "relative error" in err


def test_gradcheck_unknown_module_exit_2():
    assert main(["gradcheck", "--module", "nope"]) == 2


# -- spectrogram ---------------------------------------------------------------------
def test_spectrogram_silence(tmp_path, capsys):
    wav = tmp_path / "silence.wav"
    write_wav(Waveform(np.zeros(8000)), wav)
    assert main(["spectrogram", "--in", str(wav), "--out", str(tmp_path / "s")]) == 0
    data = np.loadtxt(tmp_path / "s.csv", delimiter=",")
    assert data.shape == (StftConfig().n_frames(8000), 80)
    np.testing.assert_allclose(data, np.log(LOG_EPS), atol=1e-5)
    assert read_pgm(tmp_path / "s.pgm").shape == data.shape


@pytest.mark.parametrize("n", [400, 1601, 16000])
def test_spectrogram_shapes(tmp_path, n, rng):
    cap = DualCapture(vib=Waveform(0.1 * rng.standard_normal(n)), mic=Waveform(0.1 * rng.standard_normal(n)))
    wav = tmp_path / "cap.wav"
    write_wav(cap, wav)
    assert main(["spectrogram", "--in", str(wav), "--channel", "mic", "--out", str(tmp_path / "m"), "--png"]) == 0
    data = np.loadtxt(tmp_path / "m.csv", delimiter=",", ndmin=2)
    assert data.shape == (StftConfig().n_frames(n), 80)
    assert read_pgm(tmp_path / "m.pgm").shape == data.shape
    assert (tmp_path / "m.png").stat().st_size > 0


def test_spectrogram_missing_file_exit_1(tmp_path):
    assert main(["spectrogram", "--in", str(tmp_path / "x.wav"), "--out", str(tmp_path / "s")]) == 1


# -- entry points --------------------------------------------------------------------
def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "duovoce", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-corpus" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "duovoce", "gen-corpus", "--n", "0", "--out", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
