import numpy as np
import pytest
import torch

from conftest import glyph
from style_diff.features import BackendDescriptor, FeatureBackend, pretrained_available
from style_diff.image_io import ImageTensor, invert
from style_diff.losses import LossWeights, NstWeights
from style_diff.transfer import (
    DifferenceObjective,
    NumericalError,
    TransferConfig,
    default_weights,
    evaluate_loss,
    gradient_check,
    gradient_check_report,
    init_generated,
    relative_error,
    run_nst,
    run_transfer,
)


@pytest.fixture
def count_forward(monkeypatch):
    calls = {"n": 0}
    original = FeatureBackend.forward

    def counting(self, x, layers):
        calls["n"] += 1
        return original(self, x, layers)

    monkeypatch.setattr(FeatureBackend, "forward", counting)
    return calls


# --- configuration -------------------------------------------------------------


def test_default_weights_vgg():
    w = default_weights(BackendDescriptor(pretrained=False))
    assert w.style_layers == ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"]
    assert w.style["conv1_2"] == pytest.approx(1e3 / 64**2)
    assert w.style["conv5_2"] == pytest.approx(1e3 / 512**2)
    assert w.content == {"conv4_2": 1e4}


def test_config_defaults():
    cfg = TransferConfig(backend=BackendDescriptor(pretrained=False))
    assert (cfg.iterations, cfg.optimizer, cfg.init, cfg.mode) == (1000, "lbfgs", "content", "difference")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"iterations": 0},
        {"optimizer": "sgd"},
        {"init": "zeros"},
        {"pixel_projection": "sigmoid"},
        {"weights": LossWeights(style={"nope": 1.0})},
        {"weights": LossWeights(style={"conv1": 0.0})},
    ],
)
def test_config_rejects(tiny, kwargs):
    with pytest.raises(ValueError):
        TransferConfig(backend=tiny, **kwargs)


def test_config_dict_round_trip(tiny):
    cfg = TransferConfig(backend=tiny, iterations=7, seed=3, snapshot_every=2, nst_weights=NstWeights(2.0, 5.0))
    assert TransferConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TransferConfig.from_dict({"bogus": 1})


def test_init_generated(rng):
    content = ImageTensor(rng.uniform(0, 1, (6, 6, 1)))
    same = init_generated(content, "content")
    assert same == content and same.pixels is not content.pixels
    a = init_generated(content, "random", seed=4)
    assert a.shape == content.shape and a == init_generated(content, "random", seed=4)
    assert a != init_generated(content, "random", seed=5)
    assert 0 <= a.pixels.min() and a.pixels.max() <= 1


# --- analytic optima -----------------------------------------------------------


def test_optimum_equal_styles_is_content(tiny_cfg, serif_triple):
    content, style, _ = serif_triple
    loss = evaluate_loss(tiny_cfg, content, style, style.copy(), content)
    assert loss.total == 0.0
    result = run_transfer(tiny_cfg, content, style, style.copy())
    assert result.initial_loss == 0.0
    # untouched iterate; only the float32 working precision shows
    np.testing.assert_allclose(result.generated.pixels, content.pixels, atol=1e-7)


def test_optimum_content_is_style2_gives_style1(tiny_cfg, serif_triple):
    _, style1, style2 = serif_triple
    loss = evaluate_loss(tiny_cfg, style2, style1, style2.copy(), style1)
    assert loss.total <= 1e-12 * max(1.0, evaluate_loss(tiny_cfg, style2, style1, style2, style2).total)


def test_total_is_content_plus_style(tiny_cfg, serif_triple):
    content, s1, s2 = serif_triple
    loss = evaluate_loss(tiny_cfg, content, s1, s2, s2)
    assert loss.total == loss.content + loss.style
    assert loss.content > 0 and loss.style > 0


def test_inverted_candidate_same_loss(tiny_cfg, serif_triple):
    content, s1, s2 = serif_triple
    a = evaluate_loss(tiny_cfg, content, s1, s2, s2)
    b = evaluate_loss(tiny_cfg, content, s1, s2, invert(s2))
    assert b.total == pytest.approx(a.total, rel=1e-6)


# --- gradients -----------------------------------------------------------------


def test_gradient_check_tiny(tiny_cfg, serif_triple):
    report = gradient_check_report(tiny_cfg, *serif_triple, n_pixels=20, seed=0)
    assert report.n_checked == 20
    assert report.max_rel_error < 1e-4


def test_gradient_check_deterministic(tiny_cfg, serif_triple):
    assert gradient_check(tiny_cfg, *serif_triple, seed=3) == gradient_check(tiny_cfg, *serif_triple, seed=3)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-13) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(2.0, 1.0) == 0.5


# --- classic NST baseline ------------------------------------------------------


def test_nst_style_equals_content_zero(tiny, serif_triple):
    content = serif_triple[0]
    cfg = TransferConfig(backend=tiny, mode="classic_nst", iterations=3)
    result = run_nst(cfg, content, content.copy())
    assert result.initial_loss == 0.0 and result.final_loss == 0.0


def test_nst_content_only_reconstructs(tiny, serif_triple):
    content = serif_triple[0]
    cfg = TransferConfig(backend=tiny, mode="classic_nst", init="random", iterations=60, nst_weights=NstWeights(1.0, 0.0))
    result = run_nst(cfg, content, serif_triple[1])
    assert result.final_loss < 0.01 * result.initial_loss


def test_nst_style_only_ignores_content(tiny, serif_triple):
    content, style, _ = serif_triple
    cfg = TransferConfig(backend=tiny, mode="classic_nst", iterations=10, nst_weights=NstWeights(0.0, 1.0))
    result = run_nst(cfg, content, style)
    for _, c, s, total in result.loss_trace:
        assert total == s
    assert result.final_loss < result.initial_loss


def test_mode_guards(tiny_cfg, serif_triple):
    with pytest.raises(ValueError):
        run_nst(tiny_cfg, *serif_triple[:2])
    cfg = TransferConfig(backend=tiny_cfg.backend, mode="classic_nst")
    with pytest.raises(ValueError):
        run_transfer(cfg, *serif_triple)


# --- optimization loop ---------------------------------------------------------


def test_size_mismatch_before_forward(tiny_cfg, serif_triple, count_forward):
    content, s1, _ = serif_triple
    with pytest.raises(ValueError, match="identical sizes"):
        run_transfer(tiny_cfg, content, s1, glyph("DejaVuSans.ttf", "T", 48))
    assert count_forward["n"] == 0


def test_forward_calls_match_evaluations(tiny, serif_triple, count_forward):
    cfg = TransferConfig(backend=tiny, iterations=8)
    result = run_transfer(cfg, *serif_triple)
    # three fixed images, then exactly one pass per distinct optimizer evaluation
    assert count_forward["n"] == 3 + result.n_evaluations
    assert result.n_evaluations >= 8


def test_trace_monotone_lbfgs(tiny, serif_triple):
    result = run_transfer(TransferConfig(backend=tiny, iterations=15), *serif_triple)
    totals = [t for *_, t in result.loss_trace]
    assert [it for it, *_ in result.loss_trace] == list(range(16))
    assert all(b <= a * (1 + 1e-6) for a, b in zip(totals, totals[1:]))
    assert result.final_loss < result.initial_loss


def test_inputs_not_mutated(tiny_cfg, serif_triple):
    before = [img.copy() for img in serif_triple]
    run_transfer(tiny_cfg, *serif_triple)
    assert all(a == b for a, b in zip(before, serif_triple))


def test_deterministic(tiny, serif_triple):
    cfg = TransferConfig(backend=tiny, iterations=6, init="random", seed=11)
    a, b = run_transfer(cfg, *serif_triple), run_transfer(cfg, *serif_triple)
    assert np.array_equal(a.generated.pixels, b.generated.pixels)
    assert a.loss_trace == b.loss_trace


@pytest.mark.parametrize("projection", ["none", "clamp_each_step", "clamp_final"])
def test_output_in_unit_range(tiny, serif_triple, projection):
    cfg = TransferConfig(backend=tiny, iterations=5, pixel_projection=projection)
    px = run_transfer(cfg, *serif_triple).generated.pixels
    assert px.min() >= 0.0 and px.max() <= 1.0


def test_first_order_optimizer(tiny, serif_triple):
    cfg = TransferConfig(backend=tiny, iterations=20, optimizer="first_order", learning_rate=1e-2)
    result = run_transfer(cfg, *serif_triple)
    # one gradient per step plus the loss of the final iterate
    assert result.n_evaluations == 21
    assert result.final_loss < result.initial_loss


def test_snapshots(tiny, serif_triple):
    result = run_transfer(TransferConfig(backend=tiny, iterations=6, snapshot_every=2), *serif_triple)
    assert [it for it, _ in result.snapshots] == [2, 4, 6]
    assert all(img.shape == serif_triple[0].shape for _, img in result.snapshots)


def test_early_stopping(tiny, serif_triple):
    content, style, _ = serif_triple
    cfg = TransferConfig(backend=tiny, iterations=200, early_stopping=True, early_stop_window=3)
    result = run_transfer(cfg, content, style, style.copy())  # already optimal: stops at once
    assert len(result.loss_trace) == 4


def test_nan_raises_with_iteration(tiny, serif_triple, monkeypatch):
    original = DifferenceObjective.__call__
    calls = {"n": 0}

    def poisoned(self, pixels):
        calls["n"] += 1
        c, s, total = original(self, pixels)
        if calls["n"] > 3:
            total = total * float("nan")
        return c, s, total

    monkeypatch.setattr(DifferenceObjective, "__call__", poisoned)
    with pytest.raises(NumericalError) as err:
        run_transfer(TransferConfig(backend=tiny, iterations=20), *serif_triple)
    assert err.value.iteration >= 1


def test_trace_csv(tiny_cfg, serif_triple):
    csv = run_transfer(tiny_cfg, *serif_triple).trace_csv()
    lines = csv.strip().splitlines()
    assert lines[0] == "iteration,content_diff,style_diff,total"
    assert len(lines) == 1 + 6


@pytest.mark.slow
@pytest.mark.skipif(not pretrained_available(19), reason="pretrained VGG-19 weights not cached")
def test_pretrained_300_iterations_converges():
    content = glyph("cmss10.ttf", "T", 256)
    s1, s2 = glyph("DejaVuSerif.ttf", "T", 256), glyph("DejaVuSans.ttf", "T", 256)
    result = run_transfer(TransferConfig(iterations=300), content, s1, s2)
    assert result.final_loss <= 0.05 * result.initial_loss
