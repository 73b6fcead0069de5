"""``morphdiff`` command line: data generation, staged training, enhancement and evaluation."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__

MANIFEST_NAME = "run_manifest.json"
MANIFEST_SCHEMA = 1

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_INPUT = 5
EXIT_RUNTIME = 6

EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_INTERNAL: "internal error (bug)",
    EXIT_USAGE: "usage error: unknown flag or bad flag value",
    EXIT_MISSING: "missing input file or directory",
    EXIT_CHECKPOINT: "incompatible or corrupt checkpoint",
    EXIT_INPUT: "invalid config, dataset or ratings table",
    EXIT_RUNTIME: "training or sampling failed (non-finite values, frozen weights changed)",
}
KINDS = {EXIT_INTERNAL: "internal", EXIT_USAGE: "usage", EXIT_MISSING: "missing_file",
         EXIT_CHECKPOINT: "checkpoint", EXIT_INPUT: "invalid_input", EXIT_RUNTIME: "runtime"}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.RawDescriptionHelpFormatter(prog, width=88, max_help_position=32)


# -- run manifest ----------------------------------------------------------------
@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    checkpoint_hashes: dict = field(default_factory=dict)
    tool_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    schema_version: int = MANIFEST_SCHEMA

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.finished_at = _now()
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _manifest(args, config: Optional[dict] = None, seeds: Optional[dict] = None) -> RunManifest:
    snap = config if config is not None else {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(args.command, snap, seeds or {}, started_at=_now())


def _stem_manifest(stem) -> Path:
    stem = Path(stem)
    return stem.with_name(stem.name + "." + MANIFEST_NAME)


# -- helpers ------------------------------------------------------------------------
def _require(path, what: str, is_dir: Optional[bool] = None) -> Path:
    p = Path(path)
    if not p.exists() or (is_dir is True and not p.is_dir()) or (is_dir is False and not p.is_file()):
        raise CLIError(EXIT_MISSING, f"{what} not found: {p}")
    return p


def _load_models(args):
    from .backbone import load_model
    from .conditioning import load_tuner

    diffusion = load_model(_require(args.ckpt_diffusion, "diffusion checkpoint", False), "diffusion")
    extractor = tuner = None
    if args.ckpt_extractor:
        extractor = load_model(_require(args.ckpt_extractor, "extractor checkpoint", False), "extractor")
    if args.ckpt_tuner:
        tuner = load_tuner(_require(args.ckpt_tuner, "tuner checkpoint", False))
    return diffusion, extractor, tuner


def _digests(**modules) -> dict:
    from .backbone import module_digest

    return {k: module_digest(m) for k, m in modules.items() if m is not None}


def _read_png(path, labels: bool = False) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.array(im.convert("L"))
    return arr.astype(np.uint8) if labels else arr.astype(np.float64) / 255.0


def _find_image(root: Path, case_id: str, inner: str) -> Optional[Path]:
    """``<root>/<id>.png`` or the dataset layout ``<root>/<id>/<inner>``."""
    for p in (root / f"{case_id}.png", root / case_id / inner):
        if p.is_file():
            return p
    return None


# -- commands ---------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .phantom import generate_cases, write_dataset

    if args.n_cases < 0:
        raise CLIError(EXIT_USAGE, "--n-cases must be >= 0")
    man = _manifest(args, seeds={"dataset": args.seed})
    cases = generate_cases(args.n_cases, args.seed, args.difficulty, args.size, split=args.split)
    out = write_dataset(cases, args.out, merge=not args.no_merge)
    man.config["case_ids"] = [c.case_id for c in cases]
    man.write(out / MANIFEST_NAME)
    return EXIT_OK


def cmd_train(args) -> int:
    from .phantom import read_dataset
    from .training import DESK_PRESET, TrainConfig, load_config_file, train_stage

    settings: dict = {}
    if args.preset == "desk":
        settings.update(DESK_PRESET["common"])
        settings.update(DESK_PRESET[args.stage])
    if args.config:
        settings.update(load_config_file(_require(args.config, "config file", False), args.stage))
    flags = {"epochs": args.epochs, "learning_rate": args.lr, "batch_size": args.batch_size, "seed": args.seed,
             "skip_mode": args.skip_mode, "diffusion_ckpt": args.ckpt_diffusion,
             "extractor_ckpt": args.ckpt_extractor, "resume": args.resume}
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.resume:
        _require(args.resume, "resume checkpoint", False)
    settings.update(data_dir=str(args.data), out_dir=str(args.out))
    cfg = TrainConfig(stage=args.stage, **settings)
    split = read_dataset(_require(args.data, "dataset directory", True))
    man = _manifest(args, config=asdict(cfg), seeds={"train": cfg.seed})
    result = train_stage(cfg, split)
    man.checkpoint_hashes = {k: v for k, v in result.items() if isinstance(v, str)}
    if "frozen_digests" in result:
        man.checkpoint_hashes["frozen_diffusion"], man.checkpoint_hashes["frozen_extractor"] = result["frozen_digests"]
    man.config["final_loss"] = result["losses"][-1] if result.get("losses") else None
    man.write(Path(args.out) / MANIFEST_NAME)
    return EXIT_OK


def _enhance_config(args):
    from .conditioning import DEFAULT_DEPTH_WEIGHTS
    from .enhancement import EnhanceConfig

    weights = tuple(args.depth_weights) if args.depth_weights else DEFAULT_DEPTH_WEIGHTS
    conditioning = "none" if args.unconditioned else "fusion"
    return EnhanceConfig(n_steps=args.steps, seed=args.seed, depth_weights=weights, skip_mode=args.skip_mode,
                         conditioning=conditioning)


def cmd_enhance(args) -> int:
    from .enhancement import CaseInput, check_compatible, enhance_batch
    from .phantom import read_dataset

    diffusion, extractor, tuner = _load_models(args)
    cfg = _enhance_config(args)
    if cfg.conditioning == "fusion":
        if extractor is None or tuner is None:
            raise CLIError(EXIT_USAGE, "fusion conditioning needs --ckpt-extractor and --ckpt-tuner (or --unconditioned)")
        check_compatible(diffusion, extractor, tuner)
    if args.stack:
        root = _require(args.stack, "stack directory", True)
        stack = []
        for k in range(1, 6):
            stack.append(_read_png(_require(root / f"depth_{k}.png", "depth image", False)))
        cases = [CaseInput(root.name, np.stack(stack))]
    else:
        split = read_dataset(_require(args.data, "dataset directory", True))
        chosen = split.test if args.split == "test" else split.train if args.split == "train" else split.cases
        cases = [CaseInput(c.case_id, c.stack, c.mask, c.clean, c.optimal_index) for c in chosen]
    man = _manifest(args, config=dict(vars(args), func=None, enhance=asdict(cfg)), seeds={"global": cfg.seed})
    digests = _digests(diffusion=diffusion, extractor=extractor, tuner=tuner)
    man.checkpoint_hashes = digests
    _, report = enhance_batch(cases, diffusion, extractor, tuner, cfg, out_dir=args.out, checkpoint_digests=digests)
    man.config["failed_cases"] = sorted(report.errors)
    man.write(Path(args.out) / MANIFEST_NAME)
    if report.errors and not report.cases:
        raise CLIError(EXIT_RUNTIME, f"all {len(report.errors)} cases failed; see {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import QualityReport, case_metrics

    enhanced = _require(args.enhanced, "enhanced directory", True)
    masks = _require(args.masks, "mask directory", True)
    reference = _require(args.reference, "reference directory", True) if args.reference else None
    report = QualityReport()
    pngs = sorted(enhanced.glob("*.png"))
    if not pngs:
        raise CLIError(EXIT_MISSING, f"no enhanced PNG images in {enhanced}")
    for png in pngs:
        cid = png.stem
        mpath = _find_image(masks, cid, "mask.png")
        if mpath is None:
            report.errors[cid] = "mask not found"
            continue
        ref = None
        if reference is not None:
            rpath = _find_image(reference, cid, "clean.png")
            if rpath is None:
                report.errors[cid] = "reference not found"
                continue
            ref = _read_png(rpath)
        try:
            report.add(cid, case_metrics(_read_png(png), _read_png(mpath, labels=True), ref))
        except ValueError as exc:
            report.errors[cid] = str(exc)
    man = _manifest(args)
    report.write(args.out)
    man.config["n_cases"] = len(report.cases)
    man.write(_stem_manifest(args.out))
    return EXIT_OK


def cmd_reliability(args) -> int:
    from .metrics import RatingsTable, reliability_report

    table = RatingsTable.from_csv(_require(args.ratings, "ratings CSV", False), region=args.region)
    model = {"mixed": "two_way_mixed", "random": "two_way_random"}[args.model]
    rep = reliability_report(table, model)
    out = Path(args.out).with_suffix(".json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rep, indent=1, sort_keys=True))
    _manifest(args).write(_stem_manifest(args.out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .enhancement import EnhanceConfig
    from .phantom import read_dataset
    from .pipeline import CONDITIONS, Checkpoints, evaluate, summarise, train_all

    split = read_dataset(_require(args.data, "dataset directory", True))
    if not split.test:
        raise CLIError(EXIT_INPUT, f"{args.data}: dataset has no test cases to ablate on")
    out = Path(args.out)
    man = _manifest(args, seeds={"global": args.seed})
    if args.ckpt:
        ckpt_dir = _require(args.ckpt, "checkpoint directory", True)
    else:
        ckpt_dir = out / "checkpoints"
        train_all(split, ckpt_dir)
    ckpts = Checkpoints.load(ckpt_dir)
    man.checkpoint_hashes = _digests(diffusion=ckpts.diffusion, extractor=ckpts.extractor, tuner=ckpts.tuner)
    table = evaluate(split.test, ckpts, EnhanceConfig(n_steps=args.steps, seed=args.seed))
    summary = summarise(table)
    out.mkdir(parents=True, exist_ok=True)
    per_case = {cond: {m: v.tolist() for m, v in table[cond].items()} for cond in ("input",) + CONDITIONS}
    (out / "ablation.json").write_text(json.dumps(
        {"conditions": {c: summary[c] for c in CONDITIONS}, "input": summary["input"],
         "case_ids": table["case_id"], "per_case": per_case}, indent=1, sort_keys=True))
    lines = ["condition\tmean_snr_db\tmean_cnr_db"]
    for c in ("input",) + CONDITIONS:
        lines.append(f"{c}\t{summary[c]['snr_db']:.6g}\t{summary[c]['cnr_db']:.6g}")
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    man.write(out / MANIFEST_NAME)
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
def _exit_code_epilog() -> str:
    return "exit codes:\n" + "\n".join(f"  {code}  {text}" for code, text in EXIT_CODES.items())


def build_parser() -> argparse.ArgumentParser:
    epilog = _exit_code_epilog()
    p = _Parser(prog="morphdiff", formatter_class=_formatter, epilog=epilog,
                description="Depth-fused diffusion enhancement of spine ultrasound projections.\n"
                            "Config files use [common] and [stageN] sections of key = value lines;\n"
                            "command-line flags override config values, which override the preset.")
    p.add_argument("--version", action="version", version=f"morphdiff {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=_formatter)
        sp.set_defaults(func=func)
        return sp

    g = add("gen-data", cmd_gen_data, "Generate a synthetic phantom dataset.")
    g.add_argument("--out", required=True, type=Path, help="dataset root directory")
    g.add_argument("--n-cases", required=True, type=int, help="number of cases (0 writes an empty manifest)")
    g.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    g.add_argument("--difficulty", choices=("easy", "hard"), default="easy", help="degradation level (default easy)")
    g.add_argument("--size", type=int, default=32, help="image side in pixels, multiple of 8 (default 32)")
    g.add_argument("--split", choices=("train", "test"), default=None,
                   help="split label (default: train for easy, test for hard)")
    g.add_argument("--no-merge", action="store_true", help="replace rather than extend an existing manifest")

    t = add("train", cmd_train, "Train one stage (1 diffusion prior, 2 feature extractor, 3 tuner).")
    t.add_argument("--stage", required=True, type=int, choices=(1, 2, 3), help="training stage")
    t.add_argument("--data", required=True, type=Path, help="dataset root directory")
    t.add_argument("--out", required=True, type=Path, help="checkpoint and log directory")
    t.add_argument("--config", type=Path, default=None, help="key = value config file")
    t.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="starting settings: desk (small CPU run) or full (default desk)")
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to continue training from")
    t.add_argument("--epochs", type=int, default=None, help="override epochs")
    t.add_argument("--lr", type=float, default=None, help="override learning rate")
    t.add_argument("--batch-size", type=int, default=None, help="override batch size")
    t.add_argument("--seed", type=int, default=None, help="override training seed")
    t.add_argument("--skip-mode", choices=("replace", "residual"), default=None,
                   help="stage 3 skip formulation (override)")
    t.add_argument("--ckpt-diffusion", default=None, help="stage 3 diffusion checkpoint (default OUT/diffusion_ema.npz)")
    t.add_argument("--ckpt-extractor", default=None, help="stage 3 extractor checkpoint (default OUT/extractor.npz)")

    e = add("enhance", cmd_enhance, "Enhance depth stacks with trained checkpoints.")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--stack", type=Path, help="directory holding depth_1.png .. depth_5.png")
    src.add_argument("--data", type=Path, help="dataset root directory")
    e.add_argument("--split", choices=("test", "train", "all"), default="test", help="dataset split (default test)")
    e.add_argument("--ckpt-diffusion", required=True, type=Path, help="diffusion checkpoint")
    e.add_argument("--ckpt-extractor", type=Path, default=None, help="extractor checkpoint")
    e.add_argument("--ckpt-tuner", type=Path, default=None, help="tuner checkpoint")
    e.add_argument("--steps", type=int, default=50, help="DDIM steps (default 50)")
    e.add_argument("--seed", type=int, default=0, help="global sampling seed (default 0)")
    e.add_argument("--depth-weights", type=float, nargs=5, default=None, metavar="W",
                   help="five depth weights (default: 0.109 0.205 0.252 0.259 0.174, renormalised)")
    e.add_argument("--skip-mode", choices=("replace", "residual"), default=None,
                   help="skip formulation (default: as recorded in the tuner)")
    e.add_argument("--unconditioned", action="store_true", help="sample the plain diffusion prior")
    e.add_argument("--out", required=True, type=Path, help="output directory")

    v = add("eval", cmd_eval, "Compute image-quality metrics for enhanced images.")
    v.add_argument("--enhanced", required=True, type=Path, help="directory of <case_id>.png outputs")
    v.add_argument("--masks", required=True, type=Path,
                   help="mask directory (<id>.png or dataset layout <id>/mask.png)")
    v.add_argument("--reference", type=Path, default=None,
                   help="reference directory (<id>.png or dataset layout <id>/clean.png)")
    v.add_argument("--out", required=True, type=Path, help="report stem; writes .json and .tsv")

    r = add("reliability", cmd_reliability, "ICC, MAD and SEM for a ratings table.")
    r.add_argument("--ratings", required=True, type=Path, help="CSV with header subject_id,<rater>,<rater>...")
    r.add_argument("--model", choices=("mixed", "random"), default="mixed", help="two-way ICC model (default mixed)")
    r.add_argument("--region", default="thoracic", help="label stored in the report (default thoracic)")
    r.add_argument("--out", required=True, type=Path, help="report stem; writes .json")

    a = add("ablate", cmd_ablate, "Compare no conditioning, optimal-depth and multi-depth fusion.")
    a.add_argument("--data", required=True, type=Path, help="dataset root with train and test splits")
    a.add_argument("--out", required=True, type=Path, help="output directory")
    a.add_argument("--ckpt", type=Path, default=None,
                   help="directory with trained checkpoints (default: train the desk preset into OUT/checkpoints)")
    a.add_argument("--steps", type=int, default=20, help="DDIM steps (default 20)")
    a.add_argument("--seed", type=int, default=0, help="global sampling seed (default 0)")
    return p


def full_help() -> str:
    """Top-level help followed by every subcommand's help."""
    parser = build_parser()
    parts = [parser.format_help()]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for name, sp in sub.choices.items():
        parts.append(sp.format_help())
    return "\n".join(parts)


def _classify(exc: BaseException) -> int:
    from .backbone import CheckpointError
    from .enhancement import EnhancementError, IncompatibleModelsError
    from .metrics import MetricError
    from .phantom import DatasetError, PhantomError
    from .training import FrozenParameterError, TrainingError

    if isinstance(exc, CLIError):
        return exc.code
    if isinstance(exc, (CheckpointError, IncompatibleModelsError)):
        return EXIT_CHECKPOINT
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, (TrainingError, FrozenParameterError, EnhancementError, FloatingPointError)):
        return EXIT_RUNTIME
    if isinstance(exc, (DatasetError, PhantomError, MetricError, ValueError)):
        return EXIT_INPUT
    return EXIT_INTERNAL


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except Exception as exc:  # one machine-parsable line per failure
        code = _classify(exc)
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"error": KINDS[code], "exit_code": code, "type": type(exc).__name__,
                          "message": message}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
