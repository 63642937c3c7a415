import numpy as np
import pytest

from duovoce.dataset import gen_toy_corpus


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    return gen_toy_corpus(6, seed=5, out_dir=out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus10(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus10")
    return gen_toy_corpus(10, seed=1, out_dir=out)


@pytest.fixture
def broken_tanh(monkeypatch):
    """Replace tanh with a copy whose backward is off by a factor of 1.5."""
    import duovoce.autodiff as ad
    from duovoce.autodiff import tensor as tensor_mod

    def bad_tanh(a):
        out = np.tanh(a.data)
        return tensor_mod._make(out, (a,), lambda g: (1.5 * g * (1 - out * out),), "tanh")

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    return bad_tanh
