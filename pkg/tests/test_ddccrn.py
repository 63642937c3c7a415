import json

import numpy as np
import pytest

from duovoce import autodiff as ad
from duovoce.audio_io import DualCapture, Waveform, read_wav, write_wav
from duovoce.autodiff import Tensor, grad_check
from duovoce.complex_nn import ComplexTensor
from duovoce.ddccrn import (
    ConfigError,
    DdccrnConfig,
    DdccrnModel,
    build,
    count_params,
    enhance_file,
    enhance_tensor,
    forward,
    mask_apply,
    sidecar_path,
    toy_config,
)
from duovoce.losses import mel_mse
from duovoce.spectral import StftConfig, istft, stft
from oracles import closed_form_params


def capture(n=3200, seed=0):
    rng = np.random.default_rng(seed)
    return DualCapture(vib=Waveform(rng.uniform(-0.2, 0.2, n)), mic=Waveform(rng.uniform(-0.5, 0.5, n)))


@pytest.fixture(scope="module")
def toy_model():
    return build(toy_config(), seed=3)


# -- config ------------------------------------------------------------------------
def test_config_roundtrip_and_field_names():
    cfg = toy_config()
    d = cfg.to_dict()
    assert set(d) == {"encoder_channels", "kernel", "stride_freq", "lstm_hidden", "lstm_layers", "mask_variant", "stft"}
    assert set(d["stft"]) == {"fft_size", "win_length", "hop_length", "window"}
    assert DdccrnConfig.from_dict(json.loads(json.dumps(d))).to_dict() == d


@pytest.mark.parametrize("kw", [dict(kernel=(0, 2)), dict(mask_variant="C"), dict(encoder_channels=[8, 0]),
                                dict(stride_freq=[2]), dict(lstm_hidden=0)])
def test_config_rejects_inconsistent(kw):
    with pytest.raises(ConfigError):
        toy_config(**kw)


def test_config_rejects_unknown_fields():
    d = toy_config().to_dict()
    d["dropout"] = 0.1
    with pytest.raises(ConfigError):
        DdccrnConfig.from_dict(d)


def test_default_config():
    cfg = DdccrnConfig()
    assert cfg.encoder_channels == [16, 32, 64, 128] and cfg.kernel == (5, 2)
    assert cfg.lstm_hidden == 128 and cfg.lstm_layers == 1 and cfg.mask_variant == "E"


# -- build / params ------------------------------------------------------------------
def test_build_deterministic_bytes(tmp_path):
    a, b = build(toy_config(), seed=7), build(toy_config(), seed=7)
    a.save(tmp_path / "a.dvck")
    b.save(tmp_path / "b.dvck")
    assert (tmp_path / "a.dvck").read_bytes() == (tmp_path / "b.dvck").read_bytes()
    c = build(toy_config(), seed=8)
    c.save(tmp_path / "c.dvck")
    assert (tmp_path / "c.dvck").read_bytes() != (tmp_path / "a.dvck").read_bytes()


@pytest.mark.parametrize("channels,kernel,hidden,layers", [
    ([8, 16], (5, 2), 32, 1),
    ([16, 32, 64, 128], (5, 2), 128, 1),
    ([4], (3, 3), 8, 2),
])
def test_count_params_closed_form(channels, kernel, hidden, layers):
    model = build(DdccrnConfig(encoder_channels=channels, kernel=kernel, lstm_hidden=hidden, lstm_layers=layers))
    assert count_params(model) == closed_form_params(channels, kernel, hidden, layers)


def test_toy_model_under_one_million():
    assert count_params(build(toy_config())) < 1_000_000


def test_count_params_trivial_models():
    assert count_params(build(DdccrnConfig(encoder_channels=[], lstm_hidden=0))) == 0
    from duovoce.complex_nn import ComplexConvLayer

    one = ComplexConvLayer.init(np.random.default_rng(0), 1, 1, (1, 1))
    m = DdccrnModel(toy_config(), [one], [], None, [])
    assert count_params(m) == 4


def test_parameter_names_prefixed(toy_model):
    names = set(toy_model.named_parameters())
    assert "enc.0.W_re" in names and "enc.1.b_im" in names
    assert any(n.startswith("lstm.0.") for n in names)
    assert any(n.startswith("dec.") for n in names)


def test_save_load_roundtrip(tmp_path, toy_model):
    p = tmp_path / "m.dvck"
    toy_model.save(p)
    assert sidecar_path(p).exists()
    side = json.loads(sidecar_path(p).read_text())
    assert side["encoder_channels"] == [8, 16] or side.get("config", {}).get("encoder_channels") == [8, 16]
    loaded = DdccrnModel.load(p)
    for name, t in toy_model.named_parameters().items():
        np.testing.assert_array_equal(loaded.named_parameters()[name].data, t.data)
    cap = capture()
    np.testing.assert_array_equal(forward(loaded, cap).samples, forward(toy_model, cap).samples)


# -- mask ----------------------------------------------------------------------------
def _spec(seed=0):
    return stft(np.random.default_rng(seed).normal(size=2000))


def test_mask_unity():
    s = _spec()
    out = mask_apply(s, np.ones(s.real.shape))
    np.testing.assert_allclose(out.magnitude(), np.tanh(1.0) * s.magnitude(), rtol=1e-6, atol=1e-9)
    assert np.tanh(1.0) == pytest.approx(0.7616, abs=1e-4)
    big = s.magnitude() > 1e-3
    np.testing.assert_allclose(np.angle(out.complex())[big], np.angle(s.complex())[big], atol=1e-6)


def test_mask_zero():
    s = _spec(1)
    out = mask_apply(s, np.zeros(s.real.shape))
    assert np.all(out.real == 0) and np.all(out.imag == 0)


def test_mask_imaginary_rotates_by_quarter_turn():
    s = _spec(2)
    out = mask_apply(s, np.full(s.real.shape, 1j))
    np.testing.assert_allclose(out.magnitude(), np.tanh(1.0) * s.magnitude(), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(out.complex(), 1j * np.tanh(1.0) * s.complex(), rtol=1e-6, atol=1e-9)


def test_mask_shape_mismatch():
    s = _spec()
    with pytest.raises(ValueError):
        mask_apply(s, np.ones((3, 3)))
    with pytest.raises(ValueError):
        mask_apply(s, np.ones(s.real.shape), variant="R")


# -- forward ---------------------------------------------------------------------------
def test_identity_mask_hook(toy_model):
    cap = capture()
    y = forward(toy_model, cap, mask_override="identity")
    ref = istft(stft(cap.mic))
    assert np.max(np.abs(y.samples - ref.samples)) < 1e-6
    assert np.max(np.abs(y.samples - cap.mic.samples)) < 1e-6


def test_zero_mask_hook(toy_model):
    assert np.all(forward(toy_model, capture(), mask_override="zero").samples == 0)


@pytest.mark.parametrize("n", [400, 1601, 3200, 8000])
def test_length_preserved_and_finite(toy_model, n):
    y = forward(toy_model, capture(n, seed=n))
    assert len(y) == n and np.all(np.isfinite(y.samples))


def test_too_short_rejected(toy_model):
    with pytest.raises(ValueError):
        forward(toy_model, capture(100))


def test_forward_deterministic(toy_model):
    cap = capture(seed=5)
    np.testing.assert_array_equal(forward(toy_model, cap).samples, forward(toy_model, cap).samples)


def test_vib_channel_is_live(toy_model):
    cap = capture(seed=6)
    no_vib = DualCapture(vib=Waveform(np.zeros(len(cap))), mic=cap.mic)
    diff = forward(toy_model, cap).samples - forward(toy_model, no_vib).samples
    assert np.linalg.norm(diff) > 0


def test_batched_matches_single(toy_model):
    caps = [capture(seed=s) for s in (1, 2)]
    mic = np.stack([c.mic.samples for c in caps])
    vib = np.stack([c.vib.samples for c in caps])
    with ad.no_grad():
        batch = enhance_tensor(toy_model, mic, vib).data
    for row, c in zip(batch, caps):
        np.testing.assert_allclose(row, forward(toy_model, c).samples, atol=1e-5)


def test_end_to_end_mel_mse_grad_check():
    model = build(toy_config(), seed=11)
    cap = capture(3200, seed=12)  # 0.2 s
    clean = cap.mic.samples[None] * 0.5
    params = list(model.named_parameters().values())

    def f(*ps):
        return mel_mse(clean, enhance_tensor(model, cap.mic.samples, cap.vib.samples))

    # small step: a wider one straddles leaky-ReLU kinks in the decoder
    assert grad_check(f, params, eps=1e-6, n_coords=2) < 1e-3


# -- enhance_file --------------------------------------------------------------------
def test_enhance_file_zero_input(tmp_path, toy_model):
    src = tmp_path / "zero.wav"
    write_wav(DualCapture(vib=Waveform(np.zeros(4000)), mic=Waveform(np.zeros(4000))), src)
    info = enhance_file(toy_model, src, tmp_path / "out.wav")
    out = read_wav(tmp_path / "out.wav")
    assert np.all(out.samples == 0)
    assert len(out) == 4000 and info["duration_s"] == pytest.approx(0.25)
    assert np.isfinite(info["processing_ms"]) and info["processing_ms"] > 0


def test_enhance_file_duration(tmp_path, toy_model):
    src = tmp_path / "in.wav"
    write_wav(capture(5000, seed=9), src)
    enhance_file(toy_model, src, tmp_path / "out.wav")
    assert len(read_wav(tmp_path / "out.wav")) == 5000
