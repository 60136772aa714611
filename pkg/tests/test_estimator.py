import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import glyph
from style_diff import NeuralStyleTransfer, StyleDifferenceTransfer, TransferConfig, run_nst, run_transfer
from style_diff.features import BackendDescriptor


def test_get_params_and_clone():
    model = StyleDifferenceTransfer(backend="tiny", iterations=4, seed=2)
    params = model.get_params()
    assert params["iterations"] == 4 and params["seed"] == 2 and params["init"] == "content"
    twin = clone(model)
    assert twin.get_params() == params
    model.set_params(iterations=9)
    assert model.iterations == 9


def test_defaults_match_config():
    cfg = StyleDifferenceTransfer(backend=BackendDescriptor(pretrained=False))._config()
    assert cfg == TransferConfig(backend=BackendDescriptor(pretrained=False))


def test_fit_transform_equals_run_transfer(tiny, serif_triple):
    content, s1, s2 = serif_triple
    model = StyleDifferenceTransfer(backend="tiny", iterations=5).fit((s1, s2))
    out = model.transform(content)
    ref = run_transfer(TransferConfig(backend=tiny, iterations=5), content, s1, s2)
    assert np.array_equal(out.pixels, ref.generated.pixels)
    assert model.result_.loss_trace == ref.loss_trace


def test_transform_many(serif_triple):
    content, s1, s2 = serif_triple
    other = glyph("STIXGeneral.ttf")
    model = StyleDifferenceTransfer(backend="tiny", iterations=3).fit([s1, s2])
    outs = model.transform([content, other])
    assert len(outs) == 2 and len(model.results_) == 2
    # each content sees its own targets: same result as a fresh single call
    single = StyleDifferenceTransfer(backend="tiny", iterations=3).fit((s1, s2)).transform(other)
    assert np.array_equal(outs[1].pixels, single.pixels)


def test_not_fitted(serif_triple):
    with pytest.raises(NotFittedError):
        StyleDifferenceTransfer(backend="tiny").transform(serif_triple[0])


def test_fit_validation(serif_triple):
    content, s1, _ = serif_triple
    with pytest.raises(ValueError, match="pair"):
        StyleDifferenceTransfer(backend="tiny").fit(s1)
    with pytest.raises(ValueError):
        StyleDifferenceTransfer(backend="tiny").fit((s1, glyph("DejaVuSans.ttf", "T", 48)))
    model = StyleDifferenceTransfer(backend="tiny", iterations=2).fit((s1, content))
    with pytest.raises(ValueError, match="fitted on"):
        model.transform(glyph("DejaVuSans.ttf", "T", 48))
    with pytest.raises(ValueError):
        StyleDifferenceTransfer(backend="resnet").fit((s1, content))


def test_loss_matches_evaluate(serif_triple):
    content, s1, s2 = serif_triple
    model = StyleDifferenceTransfer(backend="tiny").fit((s1, s1.copy()))
    assert model.loss(content, content).total == 0.0
    loss = model.loss(content, s2)
    assert loss.total == loss.content + loss.style > 0


def test_custom_weights(serif_triple):
    content, s1, s2 = serif_triple
    model = StyleDifferenceTransfer(backend="tiny", style_weights={"conv1": 1.0}, content_weights={"conv2": 0.0})
    model.fit((s1, s2))
    assert model.config_.style_layers == ["conv1"] and model.config_.content_layers == []
    assert model.loss(content, s2).content == 0.0


def test_nst_estimator(tiny, serif_triple):
    content, style, _ = serif_triple
    model = NeuralStyleTransfer(backend="tiny", alpha=1.0, beta=10.0, iterations=4).fit(style)
    out = model.transform(content)
    cfg = model.config_
    assert cfg.mode == "classic_nst" and cfg.nst_weights.beta == 10.0
    ref = run_nst(cfg, content, style)
    assert np.array_equal(out.pixels, ref.generated.pixels)
