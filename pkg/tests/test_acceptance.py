"""End-to-end acceptance checks; one test (or group) per numbered criterion.

The desk-scale run behind criteria 4, 7 and 8 trains all three stages and
takes about 11 minutes on one CPU core.  Deselect it with ``-m "not slow"``.
"""
import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import test_gradients as grads
from morphdiff.backbone import BackboneConfig, FeaturePyramid, UNet, module_digest
from morphdiff.cli import main as cli_main
from morphdiff.conditioning import DEFAULT_DEPTH_WEIGHTS, DepthWeights, Tuner, fuse_depth_features
from morphdiff.diffusion import (
    ddim_step,
    forward_diffuse,
    make_cosine_schedule,
    make_timestep_subsequence,
    predict_x0,
)
from morphdiff.enhancement import EnhanceConfig
from morphdiff.metrics import cnr, icc_absolute, ms_ssim, psnr, snr
from morphdiff.pipeline import CONDITIONS, Checkpoints, desk_split, evaluate, summarise
from morphdiff.training import desk_config, train_stage

criterion = pytest.mark.criterion


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------------------
@criterion(1, "diffusion math exactness")
def test_c1_reverse_chain_and_round_trip():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_chain = worst_trip = 0.0
    for _ in range(100):
        T = int(rng.integers(2, 1001))
        n = int(rng.integers(1, T + 1))
        sched = make_cosine_schedule(T)
        x0 = rng.random((16, 16))
        eps = rng.standard_normal((16, 16))
        steps = make_timestep_subsequence(T, n)
        x = forward_diffuse(x0, steps[0], eps, sched)
        for t, tp in zip(steps[:-1], steps[1:]):
            x = ddim_step(x, eps, t, tp, sched)
        worst_chain = max(worst_chain, float(np.max(np.abs(x - x0))))
        t = int(rng.integers(1, T + 1))
        x0_hat = predict_x0(forward_diffuse(x0, t, eps, sched), eps, t, sched)
        worst_trip = max(worst_trip, float(np.max(np.abs(x0_hat - x0))))
    assert worst_chain < 1e-5
    assert worst_trip < 1e-6
    assert time.perf_counter() - start < 60


@criterion(2, "cosine schedule properties")
def test_c2_schedule():
    # mpmath closed form (40 digits) at T=4, last ratio floored at 0.001
    oracle = [1.0, 0.84701216132690473446, 0.49384359044063771332, 0.14427210238573571088,
              0.00014427210238573571088]
    np.testing.assert_allclose(make_cosine_schedule(4).alpha_bar, oracle, rtol=0, atol=1e-12)
    ab = make_cosine_schedule(1000).alpha_bar
    assert ab[0] == 1.0 and np.all(np.diff(ab) < 0) and ab[-1] < 0.01
    assert np.all(ab[1:] / ab[:-1] >= 0.001 - 1e-15)


@criterion(3, "gradient checks")
def test_c3_gradients():
    start = time.perf_counter()
    grads.test_stage1_loss_gradients()
    grads.test_stage2_loss_gradients()
    grads.test_tuner_apply_gradients()
    grads.test_micro_unet_gradients("diffusion")
    grads.test_micro_unet_gradients("extractor")
    assert time.perf_counter() - start < 300


@criterion(5, "tuner parameter efficiency")
def test_c5_parameter_budget():
    backbone = UNet(BackboneConfig(), "diffusion")
    tuner = Tuner.for_backbone(backbone)
    assert tuner.num_parameters() / backbone.num_parameters() < 0.10


@criterion(6, "multi-depth fusion correctness")
def test_c6_fusion():
    rng = np.random.default_rng(6)
    shapes = [(2, 8, 8), (4, 4, 4), (4, 2, 2)]

    def pyramid():
        enc = [rng.standard_normal(s) for s in shapes]
        dec = [rng.standard_normal(s) for s in shapes[::-1]]
        return enc, dec

    w = DepthWeights()
    raw = [pyramid() for _ in range(5)]
    fused = fuse_depth_features([FeaturePyramid([torch.from_numpy(a) for a in e], [torch.from_numpy(a) for a in d])
                                 for e, d in raw], w)
    for lvl in range(3):
        enc_oracle = np.einsum("d,d...->...", np.array(w), np.stack([r[0][lvl] for r in raw]))
        dec_oracle = np.einsum("d,d...->...", np.array(w), np.stack([r[1][lvl] for r in raw]))
        assert np.max(np.abs(fused.encoder_conds[lvl].numpy() - enc_oracle)) <= 1e-12
        assert np.max(np.abs(fused.decoder_conds[lvl].numpy() - dec_oracle)) <= 1e-12
    for _ in range(1000):
        ws = DepthWeights(rng.dirichlet(np.ones(5)))
        raw = [pyramid() for _ in range(5)]
        pyrs = [FeaturePyramid([torch.from_numpy(a) for a in e], [torch.from_numpy(a) for a in d]) for e, d in raw]
        f = fuse_depth_features(pyrs, ws)
        for lvl in range(3):
            stack = np.stack([r[0][lvl] for r in raw])
            got = f.encoder_conds[lvl].numpy()
            assert np.all(got >= stack.min(0) - 1e-12) and np.all(got <= stack.max(0) + 1e-12)
    assert abs(sum(DEFAULT_DEPTH_WEIGHTS) - 1.0) <= 1e-3
    assert abs(sum(DepthWeights()) - 1.0) < 1e-12


@criterion(9, "metric oracles")
def test_c9_metrics():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[:, :4] = 1
    checker = np.add.outer(np.arange(8), np.arange(8)) % 2 == 1

    def image(sig, bg):
        return np.where(mask > 0, np.where(checker, *sig), np.where(checker, *bg))

    assert abs(snr(image((0.0, 0.0), (0.6, 0.8)), mask) - 20.0) < 1e-9
    assert abs(snr(image((0.5, 0.5), (0.45, 0.55)), mask) - 20.0) < 1e-9
    assert abs(cnr(image((0.1, 0.3), (0.7, 0.9)), mask) - 12.5527250510330606980) < 1e-9
    assert abs(psnr(np.full((8, 8), 0.3), np.full((8, 8), 0.4)) - 20.0) < 1e-9

    pm = pytest.importorskip("pytorch_msssim")
    rng = np.random.default_rng(9)
    for _ in range(20):
        a = rng.random((180, 180))
        b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
        assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        ref = float(pm.ms_ssim(torch.from_numpy(a)[None, None], torch.from_numpy(b)[None, None], data_range=1.0))
        assert abs(ms_ssim(a, b) - ref) < 1e-4

    for _ in range(10):
        n, k = int(rng.integers(4, 9)), int(rng.integers(2, 5))
        x = np.round(rng.normal(20, 5, (n, 1)) + rng.normal(0, 2, (n, k)), 1)
        grand = x.mean()
        ssr = k * sum((x[i].mean() - grand) ** 2 for i in range(n))
        ssc = n * sum((x[:, j].mean() - grand) ** 2 for j in range(k))
        sst = sum((x[i, j] - grand) ** 2 for i in range(n) for j in range(k))
        msr, msc, mse = ssr / (n - 1), ssc / (k - 1), (sst - ssr - ssc) / ((n - 1) * (k - 1))
        oracle = (msr - mse) / (msr + (k - 1) * mse + k / n * (msc - mse))
        assert abs(icc_absolute(x)[0] - oracle) < 1e-10
    perfect = np.repeat(rng.normal(0, 1, (6, 1)), 3, axis=1)
    assert icc_absolute(perfect)[0] == 1.0


# -- desk-scale run shared by criteria 4, 7 and 8 ----------------------------------------------
@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    split = desk_split(n_train=200, n_test=50, size=32)
    for stage in (1, 2):
        train_stage(desk_config(stage, out_dir=str(out)), split)
    frozen = ("diffusion.npz", "diffusion_ema.npz", "extractor.npz")
    before = {name: file_hash(out / name) for name in frozen}
    stage3 = train_stage(desk_config(3, out_dir=str(out)), split)
    after = {name: file_hash(out / name) for name in frozen}
    ckpts = Checkpoints.load(out)
    table = evaluate(split.test, ckpts, EnhanceConfig())
    elapsed = time.perf_counter() - start
    summary = summarise(table)
    print("\ndesk-scale summary:", {k: {m: round(v, 3) for m, v in s.items()} for k, s in summary.items()})
    print(f"desk-scale wall time: {elapsed:.0f} s")
    return {"out": out, "split": split, "before": before, "after": after, "stage3": stage3,
            "ckpts": ckpts, "table": table, "summary": summary, "elapsed": elapsed}


@pytest.mark.slow
@criterion(4, "freeze contract during stage III")
def test_c4_freeze(desk_run):
    assert desk_run["before"] == desk_run["after"]
    ckpts = desk_run["ckpts"]
    frozen_diffusion, frozen_extractor = desk_run["stage3"]["frozen_digests"]
    assert module_digest(ckpts.diffusion) == frozen_diffusion
    assert module_digest(ckpts.extractor) == frozen_extractor
    # the tuner did move away from its zero-initialised up-projections
    assert any(float(p.detach().abs().max()) > 0 for p in ckpts.tuner.up.parameters())


@pytest.mark.slow
@criterion(7, "end-to-end desk-scale improvement")
def test_c7_directionality(desk_run):
    table, summary = desk_run["table"], desk_run["summary"]
    assert len(desk_run["split"].train) >= 200 and len(table["case_id"]) >= 50
    for m in ("snr_db", "cnr_db"):
        assert summary["fusion"][m] > summary["input"][m]
        assert summary["fusion"][f"{m}_improved_fraction"] >= 0.90
    assert desk_run["elapsed"] < 30 * 60


@pytest.mark.slow
@criterion(8, "ablation ordering")
def test_c8_ablation(desk_run):
    s = desk_run["summary"]
    assert set(CONDITIONS) <= set(s)
    assert s["fusion"]["snr_db"] >= s["optimal"]["snr_db"] >= s["none"]["snr_db"]


# ------------------------------------------------------------------------------------------
def _pipeline(root: Path):
    data, ck, enh = root / "data", root / "ck", root / "enh"
    assert cli_main(["gen-data", "--out", str(data), "--n-cases", "12", "--seed", "3", "--difficulty", "easy"]) == 0
    assert cli_main(["gen-data", "--out", str(data), "--n-cases", "4", "--seed", "4", "--difficulty", "hard"]) == 0
    for stage in (1, 2, 3):
        assert cli_main(["train", "--stage", str(stage), "--data", str(data), "--out", str(ck),
                         "--epochs", "2", "--batch-size", "4"]) == 0
    assert cli_main(["enhance", "--data", str(data), "--ckpt-diffusion", str(ck / "diffusion_ema.npz"),
                     "--ckpt-extractor", str(ck / "extractor.npz"), "--ckpt-tuner", str(ck / "tuner_ema.npz"),
                     "--steps", "5", "--out", str(enh)]) == 0
    dataset = {str(p.relative_to(data)): p.read_bytes() for p in sorted(data.rglob("*"))
               if p.is_file() and p.name != "run_manifest.json"}
    # the last column is wall-clock seconds
    logs = {p.name: [line.rsplit("\t", 1)[0] for line in p.read_text().splitlines()]
            for p in sorted(ck.glob("train_log_stage*.tsv"))}
    images = {p.name: p.read_bytes() for p in sorted(enh.iterdir()) if p.suffix in (".png", ".json")
              and p.name != "run_manifest.json"}
    return dataset, logs, images


@criterion(10, "determinism across consecutive runs")
def test_c10_determinism(tmp_path):
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    for a, b in zip(first, second):
        assert a and a == b
    assert len(first[1]) == 3 and sum(name.endswith(".png") for name in first[2]) == 4
