"""Synthetic multi-depth spine phantoms.

A phantom is a bright soft-tissue background carrying dark (hypoechoic)
spine shadows: semicircular transverse processes with rib stubs on the
thoracic levels and rectangular lumps on the lumbar levels.  Each of the
five depth images shows every structure at its own visibility, then gets
multiplicative speckle and, for hard cases, row dropout bands.

Geometry lives on a 32-pixel reference grid and is scaled to the render
size, so one spec renders consistently at 32, 64, ... pixels.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .conditioning import NUM_DEPTHS, DEFAULT_DEPTH_WEIGHTS

GENERATOR_VERSION = "1.0"
REF_SIZE = 32
BACKGROUND_LEVEL = 0.72
CLASS_NAMES = {0: "background", 1: "transverse_process", 2: "rib", 3: "lumbar_lump"}

# vertical extent (fraction of height) of thoracic and lumbar segments
THORACIC_SPAN = (0.10, 0.56)
LUMBAR_SPAN = (0.68, 0.90)
PROCESS_OFFSET = 4.5
RIB_LENGTH = 4.0
RIB_DROP = 1.5
RIB_HALF_WIDTH = 0.6


class PhantomError(ValueError):
    pass


@dataclass
class PhantomSpec:
    curve: tuple  # (amplitude ref-px, frequency, phase): dx(v) = a * sin(pi*f*v + phase)
    n_thoracic: int
    n_lumbar: int
    process_radius: float
    lump_size: tuple  # (w, h) ref-px
    ground_truth_angles: tuple  # (thoracic deg, lumbar deg)
    depth_visibility: list  # D x n_structures
    speckle_strength: float
    artifact_bands: list  # [(row, height, attenuation)] ref-px rows
    seed: int
    optimal_index: int = 0  # 0-based depth
    structure_intensity: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0, 0.0)  # smooth-field coefficients
    difficulty: str = "easy"

    @property
    def n_structures(self) -> int:
        return 4 * self.n_thoracic + self.n_lumbar

    def to_json(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("curve", "lump_size", "ground_truth_angles", "background"):
            d[key] = tuple(d[key])
        d["artifact_bands"] = [tuple(b) for b in d["artifact_bands"]]
        return cls(**d)


# -- geometry --------------------------------------------------------------
def midline_offset(curve, v):
    a, f, ph = curve
    return a * np.sin(math.pi * f * np.asarray(v) + ph)


def tangent_angles(curve, v):
    """Tangent angle (deg) of the midline against vertical, in reference pixels."""
    a, f, ph = curve
    slope = a * math.pi * f * np.cos(math.pi * f * np.asarray(v) + ph) / REF_SIZE
    return np.degrees(np.arctan(slope))


def curve_angles(curve) -> tuple[float, float]:
    """Largest tangent-angle difference inside the thoracic and lumbar spans."""
    out = []
    for lo, hi in (THORACIC_SPAN, LUMBAR_SPAN):
        ang = tangent_angles(curve, np.linspace(lo, hi, 2001))
        out.append(float(ang.max() - ang.min()))
    return tuple(out)


def level_positions(n_thoracic: int, n_lumbar: int):
    th = np.linspace(*THORACIC_SPAN, n_thoracic)
    lu = np.linspace(*LUMBAR_SPAN, n_lumbar)
    return th, lu


def visibility_profile(rng, n_structures: int, optimal: int, difficulty: str) -> np.ndarray:
    vis = np.zeros((NUM_DEPTHS, n_structures))
    depths = np.arange(NUM_DEPTHS)
    for k in range(n_structures):
        if difficulty == "hard" and rng.random() < 0.5:
            choices = [d for d in depths if d != optimal and abs(d - optimal) <= 2]
            peak = int(rng.choice(choices))
            fall = rng.uniform(0.45, 0.8)
        else:
            peak = optimal
            fall = rng.uniform(0.2, 0.45)
        vis[:, k] = np.clip(1.0 - fall * np.abs(depths - peak), 0.0, 1.0)
    return np.round(vis, 4)


def sample_phantom_spec(seed: int, difficulty: str = "easy") -> PhantomSpec:
    """Random spec; ``hard`` means heavier speckle, off-optimal structures and dropout bands."""
    if difficulty not in ("easy", "hard"):
        raise PhantomError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    rng = np.random.default_rng([int(seed), 0 if difficulty == "easy" else 1])
    curve = (round(float(rng.uniform(-2.0, 2.0)), 4), round(float(rng.uniform(0.5, 1.5)), 4),
             round(float(rng.uniform(0, 2 * math.pi)), 4))
    n_thoracic = int(rng.integers(3, 5))
    n_lumbar = 2
    optimal = int(rng.choice(NUM_DEPTHS, p=np.asarray(DEFAULT_DEPTH_WEIGHTS) / sum(DEFAULT_DEPTH_WEIGHTS)))
    n_struct = 4 * n_thoracic + n_lumbar
    vis = visibility_profile(rng, n_struct, optimal, difficulty)
    if difficulty == "easy":
        speckle = float(rng.uniform(0.04, 0.10))
        bands = []
    else:
        speckle = float(rng.uniform(0.25, 0.40))
        bands = []
        for _ in range(int(rng.integers(1, 3))):
            height = float(rng.integers(2, 4))
            row = float(rng.integers(2, REF_SIZE - 2 - int(height)))
            bands.append((row, height, round(float(rng.uniform(0.35, 0.65)), 4)))
    intensity = np.round(rng.uniform(0.12, 0.22, n_struct), 4).tolist()
    background = tuple(np.round(np.concatenate([rng.uniform(-0.05, 0.05, 2), rng.uniform(0, 2 * math.pi, 2)]), 4).tolist())
    return PhantomSpec(
        curve=curve,
        n_thoracic=n_thoracic,
        n_lumbar=n_lumbar,
        process_radius=round(float(rng.uniform(1.6, 2.2)), 4),
        lump_size=(round(float(rng.uniform(4.0, 6.0)), 4), round(float(rng.uniform(2.5, 3.5)), 4)),
        ground_truth_angles=curve_angles(curve),
        depth_visibility=vis.tolist(),
        speckle_strength=round(speckle, 4),
        artifact_bands=bands,
        seed=int(seed),
        optimal_index=optimal,
        structure_intensity=intensity,
        background=background,
        difficulty=difficulty,
    )


def _structure_masks(spec: PhantomSpec, size: int) -> list[tuple[int, np.ndarray]]:
    """(class label, boolean mask) per structure, in drawing order."""
    u = size / REF_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    xx, yy = xx / u, yy / u  # to reference pixels
    th, lu = level_positions(spec.n_thoracic, spec.n_lumbar)
    r = spec.process_radius
    out = []
    for v in th:
        cy = v * REF_SIZE
        cx = REF_SIZE / 2 + float(midline_offset(spec.curve, v))
        for side in (-1, 1):
            px = cx + side * PROCESS_OFFSET
            tp = ((xx - px) ** 2 + (yy - cy) ** 2 <= r * r) & ((xx - px) * side >= 0)
            # rib: thick segment running outward and down from the process tip
            x0, y0 = px + side * r * 0.8, cy
            x1, y1 = x0 + side * RIB_LENGTH, cy + RIB_DROP
            dx, dy = x1 - x0, y1 - y0
            tpar = np.clip(((xx - x0) * dx + (yy - y0) * dy) / (dx * dx + dy * dy), 0, 1)
            dist = np.hypot(xx - (x0 + tpar * dx), yy - (y0 + tpar * dy))
            rib = (dist <= RIB_HALF_WIDTH) & ~tp
            out.append((1, tp))
            out.append((2, rib))
    w, h = spec.lump_size
    for v in lu:
        cy = v * REF_SIZE
        cx = REF_SIZE / 2 + float(midline_offset(spec.curve, v))
        out.append((3, (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)))
    return out


def _check_bounds(spec: PhantomSpec, size: int, masks):
    if size % 8:
        raise PhantomError(f"size {size} must be divisible by 8")
    for label, m in masks:
        if not m.any():
            raise PhantomError(f"structure of class {label} vanishes at size {size}")
        rows, cols = np.nonzero(m)
        if rows.min() == 0 or cols.min() == 0 or rows.max() == size - 1 or cols.max() == size - 1:
            raise PhantomError(f"structure of class {label} touches the image border")


def background_field(spec: PhantomSpec, size: int) -> np.ndarray:
    a1, a2, p1, p2 = spec.background
    v = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(v, v, indexing="ij")
    return BACKGROUND_LEVEL + a1 * np.cos(2 * math.pi * xx + p1) + a2 * np.cos(2 * math.pi * yy + p2)


def _compose(spec: PhantomSpec, size: int, visibility: Optional[np.ndarray]):
    masks = _structure_masks(spec, size)
    _check_bounds(spec, size, masks)
    img = background_field(spec, size)
    label = np.zeros((size, size), dtype=np.uint8)
    # ribs first so processes and lumps cover them where they touch
    order = sorted(range(len(masks)), key=lambda k: {2: 0, 1: 1, 3: 2}[masks[k][0]])
    for k in order:
        cls, m = masks[k]
        vis = 1.0 if visibility is None else visibility[k]
        s = spec.structure_intensity[k]
        img = np.where(m, img + vis * (s - img), img)
        label[m] = cls
    return img, label


def render_clean(spec: PhantomSpec, size: int = 32):
    """Clean reference image and its label mask (0 bg, 1 process, 2 rib, 3 lumbar)."""
    img, label = _compose(spec, size, None)
    return img, label


def add_speckle(img, seed, strength: float):
    """Multiplicative speckle ``img * (1 + strength * eta)``, eta ~ N(0, 1), clamped to [0, 1]."""
    if strength < 0:
        raise PhantomError("speckle strength must be non-negative")
    img = np.asarray(img, dtype=np.float64)
    if strength == 0:
        return img.copy()
    eta = np.random.default_rng(seed).standard_normal(img.shape)
    return np.clip(img * (1.0 + strength * eta), 0.0, 1.0)


def add_scan_artifact(img, bands: Sequence[tuple]):
    """Multiply rows of each ``(row, height, attenuation)`` band by ``attenuation``.

    Where bands overlap the strongest attenuation (smallest factor) applies.
    """
    img = np.asarray(img, dtype=np.float64)
    factor = np.ones(img.shape[0])
    for row, height, att in bands:
        row, height = int(row), int(height)
        if row < 0 or height < 1 or row + height > img.shape[0]:
            raise PhantomError(f"band rows [{row}, {row + height}) outside image of {img.shape[0]} rows")
        factor[row:row + height] = np.minimum(factor[row:row + height], att)
    return img * factor[:, None]


def scaled_bands(spec: PhantomSpec, size: int) -> list[tuple[int, int, float]]:
    u = size / REF_SIZE
    return [(int(round(r * u)), max(1, int(round(h * u))), a) for r, h, a in spec.artifact_bands]


def render_depth_stack(spec: PhantomSpec, size: int = 32) -> np.ndarray:
    """``(D, size, size)`` degraded depth images, deterministic in ``spec.seed``."""
    vis = np.asarray(spec.depth_visibility, dtype=np.float64)
    if vis.shape != (NUM_DEPTHS, spec.n_structures):
        raise PhantomError(f"visibility matrix shape {vis.shape} != {(NUM_DEPTHS, spec.n_structures)}")
    if np.any(vis.max(axis=0) < 0.9):
        raise PhantomError("some structure never reaches visibility 0.9 at any depth")
    bands = scaled_bands(spec, size)
    out = []
    for d in range(NUM_DEPTHS):
        img, _ = _compose(spec, size, vis[d])
        img = add_speckle(img, [spec.seed, d, 7], spec.speckle_strength)
        img = add_scan_artifact(img, bands)
        out.append(img)
    return np.stack(out)


# -- cases and datasets ----------------------------------------------------
def quantize(img) -> np.ndarray:
    """Snap to the 8-bit grid so images survive PNG round trips exactly."""
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


@dataclass
class PhantomCase:
    case_id: str
    spec: PhantomSpec
    clean: np.ndarray  # (H, W)
    mask: np.ndarray  # (H, W) uint8
    stack: np.ndarray  # (D, H, W)
    split: str = "train"

    @property
    def optimal_index(self) -> int:
        return self.spec.optimal_index

    @property
    def optimal_image(self) -> np.ndarray:
        return self.stack[self.spec.optimal_index]

    @property
    def artifact_free(self) -> bool:
        return not self.spec.artifact_bands


def make_case(case_id: str, spec: PhantomSpec, size: int = 32, split: str = "train") -> PhantomCase:
    clean, mask = render_clean(spec, size)
    stack = render_depth_stack(spec, size)
    return PhantomCase(case_id, spec, quantize(clean), mask, quantize(stack), split)


def case_seed(seed: int, index: int) -> int:
    return int(np.random.default_rng([int(seed), int(index)]).integers(0, 2**31 - 1))


def generate_cases(n: int, seed: int, difficulty: str = "easy", size: int = 32,
                   split: Optional[str] = None, prefix: Optional[str] = None) -> list[PhantomCase]:
    """``n`` cases with ids ``<prefix>_<i>``; resamples a spec if it does not fit."""
    split = split or ("train" if difficulty == "easy" else "test")
    prefix = prefix or f"{difficulty}{seed}"
    cases = []
    for i in range(n):
        s = case_seed(seed, i)
        for attempt in range(20):
            spec = sample_phantom_spec(s + attempt * 7919, difficulty)
            try:
                cases.append(make_case(f"{prefix}_{i:04d}", spec, size, split))
                break
            except PhantomError:
                continue
        else:
            raise PhantomError(f"could not draw a valid phantom for case {i}")
    return cases


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        ids = [c.case_id for c in self.train] + [c.case_id for c in self.test]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise PhantomError(f"case ids appear in more than one split: {dup[:5]}")

    @classmethod
    def from_cases(cls, cases: Iterable[PhantomCase]) -> "DatasetSplit":
        cases = list(cases)
        return cls([c for c in cases if c.split == "train"], [c for c in cases if c.split == "test"])

    @property
    def artifact_free(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(optimal image, mask) for training cases without dropout bands."""
        return [(c.optimal_image, c.mask) for c in self.train if c.artifact_free]

    @property
    def high_quality_groups(self) -> list[tuple[np.ndarray, int, np.ndarray]]:
        return [(c.stack, c.optimal_index, c.mask) for c in self.train]

    @property
    def test_groups(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(c.stack, c.clean) for c in self.test]

    @property
    def cases(self) -> list[PhantomCase]:
        return self.train + self.test


class DatasetError(RuntimeError):
    pass


def _write_png(path: Path, img: np.ndarray, labels: bool = False):
    arr = img.astype(np.uint8) if labels else np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def _read_png(path: Path, labels: bool = False) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.array(im.convert("L"))
    return arr.astype(np.uint8) if labels else arr.astype(np.float64) / 255.0


def write_dataset(cases: Sequence[PhantomCase], out_dir, merge: bool = True) -> Path:
    """Write ``<root>/<case_id>/{depth_1..5,clean,mask}.png`` + ``spec.json`` and ``manifest.json``.

    With ``merge`` the manifest of an existing dataset is extended.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.json"
    splits: dict = {"train": [], "test": []}
    if merge and manifest_path.exists():
        splits = json.loads(manifest_path.read_text())["splits"]
    for c in cases:
        d = root / c.case_id
        d.mkdir(exist_ok=True)
        for k, img in enumerate(c.stack, start=1):
            _write_png(d / f"depth_{k}.png", img)
        _write_png(d / "clean.png", c.clean)
        _write_png(d / "mask.png", c.mask, labels=True)
        (d / "spec.json").write_text(json.dumps({"size": int(c.clean.shape[0]), **c.spec.to_json()}, indent=1))
        for s in splits:
            if c.case_id in splits[s]:
                splits[s].remove(c.case_id)
        splits.setdefault(c.split, []).append(c.case_id)
    manifest = {"generator_version": GENERATOR_VERSION, "splits": {k: sorted(v) for k, v in splits.items()}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_case(case_dir, split: str = "train") -> PhantomCase:
    d = Path(case_dir)
    try:
        meta = json.loads((d / "spec.json").read_text())
        size = meta.pop("size")
        spec = PhantomSpec.from_json(meta)
        stack = np.stack([_read_png(d / f"depth_{k}.png") for k in range(1, NUM_DEPTHS + 1)])
        clean = _read_png(d / "clean.png")
        mask = _read_png(d / "mask.png", labels=True)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"case {d.name}: cannot load ({exc})") from exc
    if stack.shape[1:] != (size, size) or clean.shape != (size, size) or mask.shape != (size, size):
        raise DatasetError(f"case {d.name}: image sizes disagree with spec.json size {size}")
    if mask.max() > 3:
        raise DatasetError(f"case {d.name}: mask label {mask.max()} outside 0..3")
    return PhantomCase(d.name, spec, clean, mask, stack, split)


def read_dataset(root) -> DatasetSplit:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{root}: missing or corrupt manifest.json ({exc})") from exc
    cases = []
    for split, ids in manifest["splits"].items():
        for cid in ids:
            cases.append(read_case(root / cid, split))
    return DatasetSplit.from_cases(cases)
