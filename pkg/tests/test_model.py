import math
import warnings

import numpy as np
import pytest

from corrprune import diffmath as dm
from corrprune import geometry
from corrprune.audit import _module_cases
from corrprune.exceptions import ConfigError, DegenerateGeometryWarning
from corrprune.model import (ABLATIONS, ModelConfig, ablation, classification_loss, embed,
                             forward, init_params, inlier_probability, parameter_groups,
                             regression_term, total_loss)
from corrprune.synthdata import SceneSpec, generate_scene

SMALL = ModelConfig(n_layers=2, d=16, n_state=4, k=4, groups=2)


def _scene(n=32, seed=0, rho=0.3):
    return generate_scene(SceneSpec(n_points=n, outlier_ratio=rho, noise_sigma=1e-3, seed=seed))


def _bce_loop(o, z, pw):
    total = 0.0
    for oi, zi in zip(np.ravel(o), np.ravel(z)):
        p = 1.0 / (1.0 + math.exp(-oi))
        total += -(pw * zi * math.log(p) + (1 - zi) * math.log(1 - p))
    return total / np.size(o)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(k=9, groups=2)
    with pytest.raises(ConfigError) as exc:
        ModelConfig(dtype="float16")
    assert exc.value.key == "dtype"
    with pytest.raises(ConfigError):
        ModelConfig(use_mamba=True, use_linear_attention=True)
    with pytest.raises(ConfigError):
        ablation(SMALL, "vii")


def test_embed_pointwise():
    params, state = init_params(SMALL, 0)
    rng = np.random.default_rng(1)
    c = rng.normal(size=(1, 20, 4))
    c[0, 5] = c[0, 2]
    perm = rng.permutation(20)
    a = embed(c, params, state, exact=True).value
    b = embed(c[:, perm], params, state, exact=True).value
    np.testing.assert_array_equal(a[:, perm], b)
    np.testing.assert_array_equal(a[0, 5], a[0, 2])


def test_embed_gradcheck():
    inputs, f = _module_cases()["embed"]
    assert dm.finite_diff_check(f, inputs, max_coords=24, seed=1).passed


def test_forward_shapes_and_determinism():
    params, state = init_params(SMALL, 0)
    c = _scene().corr.coords
    a = forward(c, params, SMALL, state)
    b = forward(c, params, SMALL, state)
    assert len(a.logits) == 2 and a.final_logits.shape == (1, 32)
    np.testing.assert_array_equal(a.final_logits, b.final_logits)
    assert np.all((a.probabilities >= 0) & (a.probabilities < 1))


@pytest.mark.parametrize("row", sorted(ABLATIONS))
def test_ablation_rows_produce_logits(row):
    cfg = ablation(SMALL, row)
    params, state = init_params(cfg, 1)
    out = forward(_scene().corr.coords, params, cfg, state)
    assert out.final_logits.shape == (1, 32)
    assert np.all(np.isfinite(out.final_logits))


def test_all_blocks_off():
    cfg = ModelConfig(n_layers=1, d=8, n_state=4, k=4, groups=2, use_cslb=False,
                      use_lgpl=False, use_mamba=False, use_channel_aware=False)
    params, state = init_params(cfg, 2)
    assert forward(_scene(n=16).corr.coords, params, cfg, state).final_logits.shape == (1, 16)


def test_forward_train_mode_updates_state():
    params, state = init_params(SMALL, 0)
    before = {k: v.copy() for k, v in state.items()}
    forward(_scene().corr.coords, params, SMALL, state, mode="train", seed=1)
    assert any(not np.array_equal(before[k], state[k]) for k in state)


def test_permutation_equivariance():
    params, state = init_params(SMALL, 3)
    c = _scene(seed=4).corr.coords
    base = forward(c, params, SMALL, state, essentials=False).final_logits[0]
    rng = np.random.default_rng(5)
    for _ in range(5):
        perm = rng.permutation(len(c))
        got = forward(c[perm], params, SMALL, state, essentials=False).final_logits[0]
        np.testing.assert_array_equal(got, base[perm])


def test_forward_rejects_tiny_sets():
    params, state = init_params(SMALL, 0)
    with pytest.raises(ValueError):
        forward(np.zeros((5, 4)), params, SMALL, state)


def test_parameter_groups():
    params, _ = init_params(SMALL, 0)
    groups = parameter_groups(params)
    assert "layer0.scorer.fc1" in groups and "layer1.mamba" in groups
    assert sum(len(v) for v in groups.values()) == len(params)


def test_inlier_probability_examples():
    p = inlier_probability(np.array([0.0, -5.0, 30.0]))
    assert p[0] == 0.0 and p[1] == 0.0
    assert p[2] < 1.0 and p[2] == pytest.approx(1 - 1e-9, abs=1e-9)
    assert not np.array([0.0]) > 0


def test_bce_zero_logits():
    assert classification_loss(np.zeros(10), np.arange(10) % 2, balanced=False) == pytest.approx(
        math.log(2), abs=1e-15)


def test_bce_separated():
    z = np.array([1, 0, 1, 1, 0])
    assert classification_loss(np.where(z, 40.0, -40.0), z) < 1e-6


@pytest.mark.parametrize("balanced", [False, True])
def test_bce_matches_loop(balanced):
    rng = np.random.default_rng(6)
    o = rng.normal(scale=3, size=(3, 17))
    z = (rng.random((3, 17)) < 0.3).astype(float)
    pw = float(np.clip((z.size - z.sum()) / z.sum(), 0.1, 10)) if balanced else 1.0
    assert classification_loss(o, z, balanced=balanced) == pytest.approx(_bce_loop(o, z, pw),
                                                                          abs=1e-12)


def _loss_instance(seed=7):
    cfg = ModelConfig(n_layers=2, d=16, n_state=4, k=4, groups=2, dtype="float64")
    params, _ = init_params(cfg, seed)
    for l in range(2):
        params[f"layer{l}.head.b"] = np.full(1, 0.5)
    corr = _scene(seed=seed).corr
    coords, labels, E = corr.coords[None], corr.labels[None], corr.essential[None]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateGeometryWarning)
        out = forward(coords, params, cfg, None, mode="train", seed=1)
    return cfg, out, coords, labels, E


def test_total_loss_warmup_and_zero():
    cfg, out, coords, labels, E = _loss_instance()
    loss, parts = total_loss(out, labels, E, coords, alpha=0.7, beta=0.0, config=cfg)
    expect = sum(0.7 * classification_loss(o.value, labels) for o in out.logits)
    assert float(loss.value) == pytest.approx(expect, abs=1e-12)
    assert parts["reg"] == [0.0, 0.0]
    loss, _ = total_loss(out, labels, E, coords, alpha=0.0, beta=0.0, config=cfg)
    assert float(loss.value) == 0.0


def test_total_loss_composition():
    cfg, out, coords, labels, E = _loss_instance()
    assert all(v.all() for v in out.valid)
    loss, parts = total_loss(out, labels, E, coords, alpha=1.0, beta=0.5, config=cfg)
    expect = 0.0
    for l in range(2):
        expect += classification_loss(out.logits[l].value, labels)
        per = geometry.regression_loss(out.essentials[l].value, E, coords,
                                       denominator=cfg.sampson_denominator,
                                       row_weights=labels.astype(float))
        expect += 0.5 * float(np.mean(np.asarray(getattr(per, "value", per))))
    assert float(loss.value) == pytest.approx(expect, abs=1e-12)
    reg = regression_term(out.essentials[0], E, coords, labels, out.valid[0], cfg)
    assert parts["reg"][0] == pytest.approx(float(reg.value), abs=1e-15)


def test_total_loss_skips_invalid_layer():
    cfg, out, coords, labels, E = _loss_instance()
    out.essentials[1] = None
    with pytest.warns(DegenerateGeometryWarning):
        _, parts = total_loss(out, labels, E, coords, beta=0.5, config=cfg)
    assert math.isnan(parts["reg"][1])
