import json

import numpy as np
import pytest
import torch

import morphdiff.enhancement as enh
from morphdiff.backbone import BackboneConfig, UNet, module_digest
from morphdiff.conditioning import Tuner
from morphdiff.diffusion import make_cosine_schedule
from morphdiff.enhancement import (
    CaseInput,
    EnhanceConfig,
    EnhancementError,
    IncompatibleModelsError,
    case_seed,
    enhance,
    enhance_batch,
    load_png,
    resolve_skip_mode,
    save_png,
)

SCHED = make_cosine_schedule(100)


def micro(role, base=4, seed=0):
    torch.manual_seed(seed)
    cfg = BackboneConfig(image_size=16, base_channels=base, num_res_blocks=1).role_variant(role)
    return UNet(cfg, role).eval()


@pytest.fixture(scope="module")
def models():
    d, e = micro("diffusion"), micro("extractor", seed=1)
    torch.manual_seed(2)
    tuner = Tuner([c for c, _, _ in d.config.skip_shapes()])
    for p in tuner.parameters():
        p.data.normal_(0, 0.1)
    return d, e, tuner


def stacks(n, seed=0):
    rng = np.random.default_rng(seed)
    return [CaseInput(f"c{i}", rng.random((5, 16, 16)), mask=rng.integers(0, 4, (16, 16)),
                      reference=rng.random((16, 16))) for i in range(n)]


CFG = EnhanceConfig(n_steps=4, seed=3, skip_mode="replace")


def test_enhance_is_deterministic_and_bounded(models):
    case = stacks(1)[0]
    a = enhance(case.stack, *models, CFG, SCHED, case_id="x")
    b = enhance(case.stack, *models, CFG, SCHED, case_id="x")
    assert a.shape == (16, 16)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_seed_changes_output(models):
    case = stacks(1)[0]
    a = enhance(case.stack, *models, CFG, SCHED, case_id="x")
    b = enhance(case.stack, *models, EnhanceConfig(n_steps=4, seed=4, skip_mode="replace"), SCHED, case_id="x")
    assert not np.array_equal(a, b)


def test_case_seed_independent_of_batch_order():
    assert case_seed(1, "a") == case_seed(1, "a")
    assert case_seed(1, "a") != case_seed(1, "b")
    assert case_seed(1, "a") != case_seed(2, "a")


def test_conditioning_changes_output(models):
    case = stacks(1)[0]
    fused = enhance(case.stack, *models, CFG, SCHED, case_id="x")
    plain = enhance(case.stack, *models, EnhanceConfig(n_steps=4, seed=3, conditioning="none"), SCHED, case_id="x")
    assert not np.array_equal(fused, plain)


def test_unconditioned_ignores_extractor_and_tuner(models):
    d, _, _ = models
    case = stacks(1)[0]
    cfg = EnhanceConfig(n_steps=4, seed=3, conditioning="none")
    np.testing.assert_array_equal(enhance(case.stack, d, None, None, cfg, SCHED, case_id="x"),
                                  enhance(case.stack, *models, cfg, SCHED, case_id="x"))


def test_extractor_runs_once_and_conditions_are_reused(models, monkeypatch):
    d, e, t = models
    calls, seen = [], []
    real_extract = enh.extract_conditions

    def counting(extractor, stack, weights):
        calls.append(1)
        return real_extract(extractor, stack, weights)

    real_forward = d.forward

    def spy(x, t_, conditions=None, **kw):
        seen.append(conditions)
        return real_forward(x, t_, conditions=conditions, **kw)

    monkeypatch.setattr(enh, "extract_conditions", counting)
    monkeypatch.setattr(d, "forward", spy)
    enhance(stacks(1)[0].stack, d, e, t, EnhanceConfig(n_steps=6, seed=0, skip_mode="replace"), SCHED, case_id="x")
    assert len(calls) == 1
    assert len(seen) == 6 and all(c is seen[0] for c in seen) and seen[0] is not None


def test_batch_equals_sequential(models, tmp_path):
    cases = stacks(3)
    images, report = enhance_batch(cases, *models, CFG, tmp_path, SCHED)
    for c in cases:
        np.testing.assert_array_equal(images[c.case_id], enhance(c.stack, *models, CFG, SCHED, case_id=c.case_id))
    # reversed order gives the same per-case results
    rev, _ = enhance_batch(cases[::-1], *models, CFG, None, SCHED)
    for cid in images:
        np.testing.assert_array_equal(images[cid], rev[cid])
    assert set(report.cases) == {"c0", "c1", "c2"} and not report.errors


def test_empty_batch(models, tmp_path):
    images, report = enhance_batch([], *models, CFG, tmp_path, SCHED)
    assert images == {} and report.cases == {} and report.errors == {}
    assert json.loads((tmp_path / "report.json").read_text())["cases"] == {}


def test_failures_are_isolated(models, tmp_path):
    cases = stacks(3)
    cases[1] = CaseInput("bad", np.zeros((4, 16, 16)))
    images, report = enhance_batch(cases, *models, CFG, tmp_path, SCHED)
    assert set(images) == {"c0", "c2"}
    assert "bad" in report.errors and "EnhancementError" in report.errors["bad"]
    assert not (tmp_path / "bad.png").exists()


def test_sidecar_contents(models, tmp_path):
    d, e, t = models
    enhance_batch(stacks(1), d, e, t, CFG, tmp_path, SCHED)
    side = json.loads((tmp_path / "c0.json").read_text())
    assert side["seed"] == case_seed(3, "c0") and side["global_seed"] == 3
    assert side["n_steps"] == 4 and side["skip_mode"] == "replace" and side["conditioning"] == "fusion"
    assert side["checkpoint_digests"] == {"diffusion": module_digest(d), "extractor": module_digest(e),
                                          "tuner": module_digest(t)}
    assert len(side["depth_weights"]) == 5
    assert set(side["metrics"]) >= {"snr_db", "cnr_db", "psnr_db", "ms_ssim"}
    png = load_png(tmp_path / "c0.png")
    assert png.shape == (16, 16)


def test_png_round_trip_quantisation(tmp_path):
    img = np.random.default_rng(0).random((8, 8))
    save_png(tmp_path / "x.png", img)
    assert np.max(np.abs(load_png(tmp_path / "x.png") - img)) <= 0.5 / 255 + 1e-12


def test_incompatible_models(models):
    d, e, t = models
    stack = stacks(1)[0].stack
    with pytest.raises(IncompatibleModelsError):
        enhance(stack, e, e, t, CFG, SCHED)
    with pytest.raises(IncompatibleModelsError):
        enhance(stack, d, micro("extractor", base=8), t, CFG, SCHED)
    with pytest.raises(IncompatibleModelsError):
        enhance(np.zeros((5, 32, 32)), d, e, t, CFG, SCHED)
    stale = Tuner(t.config.channels)
    stale.load_state_dict(t.state_dict())
    stale.meta = {"diffusion_digest": "0" * 64}
    with pytest.raises(IncompatibleModelsError):
        enhance(stack, d, e, stale, CFG, SCHED)
    with pytest.raises(EnhancementError):
        enhance(stack, d, None, None, CFG, SCHED)


def test_skip_mode_resolution(models):
    _, _, t = models
    tagged = Tuner(t.config.channels)
    tagged.meta = {"skip_mode": "residual"}
    assert resolve_skip_mode(EnhanceConfig(), tagged) == "residual"
    assert resolve_skip_mode(EnhanceConfig(skip_mode="replace"), tagged) == "replace"
    assert resolve_skip_mode(EnhanceConfig(), None) == "replace"
    with pytest.raises(ValueError):
        EnhanceConfig(skip_mode="other")
