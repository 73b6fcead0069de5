import argparse
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from morphdiff.cli import EXIT_CODES, MANIFEST_NAME, RunManifest, build_parser, full_help, main

GOLDEN = Path(__file__).parent / "golden" / "help.txt"


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


def tree_bytes(root: Path, skip=(MANIFEST_NAME,)):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(skip)}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, ck = root / "data", root / "ck"
    assert main(["gen-data", "--out", str(data), "--n-cases", "8", "--seed", "1", "--difficulty", "easy"]) == 0
    assert main(["gen-data", "--out", str(data), "--n-cases", "3", "--seed", "2", "--difficulty", "hard"]) == 0
    for stage in (1, 2, 3):
        assert main(["train", "--stage", str(stage), "--data", str(data), "--out", str(ck), "--epochs", "1",
                     "--batch-size", "4"]) == 0
    return root, data, ck


# -- help and errors ----------------------------------------------------------
def test_help_matches_golden_file():
    assert full_help() == GOLDEN.read_text()


def test_help_documents_every_flag_and_exit_code():
    text = full_help()
    parser = build_parser()
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in sub.choices.values():
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text
    for code, desc in EXIT_CODES.items():
        assert f"  {code}  {desc}" in text


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0


def parse_error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_error_codes_are_distinct_and_machine_parsable(tmp_path, capsys, trained):
    _, data, ck = trained
    codes = {}
    code, err = run(["gen-data", "--bogus"], capsys)
    codes["usage"] = (code, parse_error(err))
    code, err = run(["train", "--stage", "1", "--data", tmp_path / "none", "--out", tmp_path / "o"], capsys)
    codes["missing_file"] = (code, parse_error(err))
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"garbage")
    code, err = run(["enhance", "--data", data, "--ckpt-diffusion", bad, "--unconditioned", "--out", tmp_path / "e"],
                    capsys)
    codes["checkpoint"] = (code, parse_error(err))
    csv = tmp_path / "r.csv"
    csv.write_text("subject_id,a,b\n1,2,x\n")
    code, err = run(["reliability", "--ratings", csv, "--out", tmp_path / "rel"], capsys)
    codes["invalid_input"] = (code, parse_error(err))
    for kind, (code, payload) in codes.items():
        assert payload["error"] == kind and payload["exit_code"] == code
        assert set(payload) == {"error", "exit_code", "type", "message"}
    assert [c for c, _ in codes.values()] == [2, 3, 4, 5]


def test_incompatible_checkpoints_exit_4(tmp_path, capsys, trained):
    _, data, ck = trained
    other = tmp_path / "other"
    assert main(["train", "--stage", "2", "--data", str(data), "--out", str(other), "--epochs", "1",
                 "--seed", "9"]) == 0
    code, err = run(["enhance", "--data", data, "--ckpt-diffusion", ck / "diffusion_ema.npz",
                     "--ckpt-extractor", other / "extractor.npz", "--ckpt-tuner", ck / "tuner_ema.npz",
                     "--steps", "2", "--out", tmp_path / "e"], capsys)
    assert code == 4 and parse_error(err)["type"] == "IncompatibleModelsError"


# -- commands -----------------------------------------------------------------
def test_gen_data_zero_cases(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--n-cases", "0"]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["splits"] == {"train": [], "test": []}
    run_man = RunManifest.read(tmp_path / "d" / MANIFEST_NAME)
    assert run_man.command == "gen-data" and run_man.config["case_ids"] == []


def test_gen_data_is_bit_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n-cases", "3", "--seed", "4",
                     "--difficulty", "hard"]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b


def test_train_writes_manifest_with_hashes(trained):
    _, _, ck = trained
    man = RunManifest.read(ck / MANIFEST_NAME)
    assert man.command == "train" and man.config["stage"] == 3
    assert "frozen_diffusion" in man.checkpoint_hashes and "frozen_extractor" in man.checkpoint_hashes
    assert man.seeds == {"train": 0}
    for name in ("diffusion.npz", "diffusion_ema.npz", "extractor.npz", "tuner.npz", "tuner_ema.npz"):
        assert (ck / name).is_file()


def test_config_file_precedence(tmp_path, trained):
    _, data, _ = trained
    cfg = tmp_path / "c.ini"
    cfg.write_text("[common]\nbatch_size = 2\n[stage2]\nepochs = 1\nlearning_rate = 0.01\n")
    out = tmp_path / "o"
    assert main(["train", "--stage", "2", "--data", str(data), "--out", str(out), "--config", str(cfg),
                 "--lr", "0.005"]) == 0
    snap = RunManifest.read(out / MANIFEST_NAME).config
    assert snap["batch_size"] == 2 and snap["epochs"] == 1 and snap["learning_rate"] == 0.005


def test_enhance_eval_sequence_is_reproducible(tmp_path, trained):
    _, data, ck = trained
    common = ["--data", data, "--ckpt-diffusion", ck / "diffusion_ema.npz", "--ckpt-extractor", ck / "extractor.npz",
              "--ckpt-tuner", ck / "tuner_ema.npz", "--steps", "3", "--seed", "5"]
    for name in ("e1", "e2"):
        assert run(["enhance", *common, "--out", tmp_path / name]) == (0, "")
    a, b = tree_bytes(tmp_path / "e1"), tree_bytes(tmp_path / "e2")
    pngs = [k for k in a if k.endswith(".png")]
    assert len(pngs) == 3 and a == b
    side = json.loads((tmp_path / "e1" / pngs[0].replace(".png", ".json")).read_text())
    assert side["skip_mode"] == "residual"  # recorded by the desk-preset tuner
    assert run(["eval", "--enhanced", tmp_path / "e1", "--masks", data, "--reference", data,
                "--out", tmp_path / "rep" / "quality"]) == (0, "")
    report = json.loads((tmp_path / "rep" / "quality.json").read_text())
    assert len(report["cases"]) == 3 and not report["errors"]
    assert set(report["aggregate"]) == {"ms_ssim", "psnr_db", "snr_db", "cnr_db"}
    assert (tmp_path / "rep" / "quality.tsv").is_file()
    assert (tmp_path / "rep" / f"quality.{MANIFEST_NAME}").is_file()


def test_enhance_single_stack(tmp_path, trained):
    _, data, ck = trained
    case_dir = next(p for p in sorted(data.iterdir()) if p.name.startswith("hard"))
    stack = tmp_path / "mystack"
    shutil.copytree(case_dir, stack)
    assert run(["enhance", "--stack", stack, "--ckpt-diffusion", ck / "diffusion_ema.npz", "--unconditioned",
                "--steps", "2", "--out", tmp_path / "o"]) == (0, "")
    assert (tmp_path / "o" / "mystack.png").is_file()


def test_reliability_report(tmp_path):
    csv = tmp_path / "r.csv"
    rng = np.random.default_rng(0)
    truth = rng.normal(20, 8, 12)
    rows = [f"s{i},{t + rng.normal(0, 1):.3f},{t + rng.normal(0, 1):.3f}" for i, t in enumerate(truth)]
    csv.write_text("subject_id,r1,r2\n" + "\n".join(rows) + "\n")
    assert main(["reliability", "--ratings", str(csv), "--model", "random", "--region", "lumbar",
                 "--out", str(tmp_path / "rel")]) == 0
    rep = json.loads((tmp_path / "rel.json").read_text())
    assert rep["model"] == "two_way_random" and rep["region"] == "lumbar" and rep["icc"] > 0.8
    assert (tmp_path / f"rel.{MANIFEST_NAME}").is_file()


def test_ablate_schema(tmp_path, trained):
    _, data, ck = trained
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data), "--ckpt", str(ck), "--steps", "2", "--out", str(out)]) == 0
    rep = json.loads((out / "ablation.json").read_text())
    assert sorted(rep["conditions"]) == ["fusion", "none", "optimal"]
    for summary in rep["conditions"].values():
        assert {"snr_db", "cnr_db"} <= set(summary)
    assert len(rep["case_ids"]) == 3
    rows = (out / "ablation.tsv").read_text().splitlines()
    assert rows[0] == "condition\tmean_snr_db\tmean_cnr_db" and len(rows) == 5
    assert (out / MANIFEST_NAME).is_file()
