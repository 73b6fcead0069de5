"""Image-quality and rater-reliability statistics.

SNR and CNR treat the dark spine shadows (mask classes 1-3) as signal and
class 0 as background.  Degenerate denominators map to signed-infinity
sentinels with a warning instead of raising.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_CAP = 100.0


class MetricError(ValueError):
    pass


def region_stats(img, mask) -> tuple[float, float, float, float]:
    """``(mu_s, sigma_s, mu_b, sigma_b)``; population (ddof=0) standard deviations."""
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise MetricError(f"image {img.shape} and mask {mask.shape} differ in shape")
    sig = mask > 0
    if not sig.any():
        raise MetricError("mask has no signal (class 1-3) pixels")
    if sig.all():
        raise MetricError("mask has no background (class 0) pixels")
    s, b = img[sig], img[~sig]
    return float(s.mean()), float(s.std()), float(b.mean()), float(b.std())


def _db(num: float, den: float, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what}: zero noise denominator, reporting +inf", RuntimeWarning, stacklevel=3)
        return math.inf
    if num == 0:
        warnings.warn(f"{what}: zero numerator, reporting -inf", RuntimeWarning, stacklevel=3)
        return -math.inf
    return 20.0 * math.log10(num / den)


def snr(img, mask) -> float:
    """``20 log10((1 - mu_s) / sigma_b)`` in dB."""
    mu_s, _, _, sd_b = region_stats(img, mask)
    return _db(1.0 - mu_s, sd_b, "SNR")


def cnr(img, mask) -> float:
    """``20 log10(|mu_s - mu_b| / sqrt(sigma_s^2 + sigma_b^2))`` in dB."""
    mu_s, sd_s, mu_b, sd_b = region_stats(img, mask)
    return _db(abs(mu_s - mu_b), math.sqrt(sd_s**2 + sd_b**2), "CNR")


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


# -- MS-SSIM ------------------------------------------------------------------
def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, win):
    rows = sliding_window_view(img, len(win), axis=0) @ win
    return sliding_window_view(rows, len(win), axis=1) @ win


def _ssim_cs(a, b, win, data_range, K):
    c1 = (K[0] * data_range) ** 2
    c2 = (K[1] * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    cs_map = (2 * cov + c2) / (var_a + var_b + c2)
    ssim_map = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1) * cs_map
    return float(ssim_map.mean()), float(cs_map.mean())


def _avg_pool2(img):
    ph, pw = img.shape[0] % 2, img.shape[1] % 2
    if ph or pw:
        # zero padding counted in the mean, as in common GPU implementations
        img = np.pad(img, ((ph, ph), (pw, pw)))
        h, w = img.shape
        img = img[: h - h % 2, : w - w % 2]
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim_scales(shape, win_size: int = 11, max_scales: int = 5) -> int:
    m = min(shape)
    n = 0
    while n < max_scales and m >= 2**n * win_size:
        n += 1
    return n


def ms_ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
            K=(0.01, 0.03), weights: Sequence[float] = MS_SSIM_WEIGHTS, return_scales: bool = False):
    """Multi-scale SSIM; uses as many of the five scales as the image size allows.

    With fewer scales the leading weights are renormalised to sum to one.
    Contrast and similarity terms are clipped at zero before exponentiation.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise MetricError(f"ms_ssim needs equal 2-D images, got {a.shape} and {b.shape}")
    n = ms_ssim_scales(a.shape, win_size, len(weights))
    if n == 0:
        raise MetricError(f"image {a.shape} too small for an {win_size}-pixel window")
    w = np.asarray(weights[:n], dtype=np.float64)
    w = w / w.sum()
    win = gaussian_window(win_size, sigma)
    terms = []
    for level in range(n):
        s, cs = _ssim_cs(a, b, win, data_range, K)
        if level < n - 1:
            terms.append(max(cs, 0.0))
            a, b = _avg_pool2(a), _avg_pool2(b)
    terms.append(max(s, 0.0))
    value = float(np.prod(np.asarray(terms) ** w))
    return (value, n) if return_scales else value


# -- reliability --------------------------------------------------------------
ICC_MODELS = ("two_way_mixed", "two_way_random")


@dataclass
class RatingsTable:
    values: np.ndarray  # n subjects x k raters
    region: str = "thoracic"
    subject_ids: list = field(default_factory=list)
    rater_names: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise MetricError("ratings must be a 2-D subjects x raters table")
        n, k = self.values.shape
        if n < 2 or k < 2:
            raise MetricError(f"need at least 2 subjects and 2 raters, got {n}x{k}")
        if not np.all(np.isfinite(self.values)):
            raise MetricError("ratings table has missing or non-finite cells")

    @classmethod
    def from_csv(cls, path, region: str = "thoracic") -> "RatingsTable":
        """Header row ``subject_id, <rater or session columns...>``."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or len(rows[0]) < 3:
            raise MetricError(f"{path}: expected header 'subject_id,<rater>,<rater>...'")
        header, body = rows[0], [r for r in rows[1:] if r]
        try:
            values = [[float(x) for x in r[1:]] for r in body]
        except ValueError as exc:
            raise MetricError(f"{path}: non-numeric rating ({exc})") from exc
        if any(len(r) != len(header) - 1 for r in values):
            raise MetricError(f"{path}: ragged rows")
        return cls(np.array(values), region, [r[0] for r in body], header[1:])


def anova_two_way(x) -> dict:
    """Mean squares of the two-way (subjects x raters) ANOVA without replication."""
    x = np.asarray(x, dtype=np.float64)
    n, k = x.shape
    grand = x.mean()
    ss_rows = k * np.sum((x.mean(axis=1) - grand) ** 2)
    ss_cols = n * np.sum((x.mean(axis=0) - grand) ** 2)
    # residuals directly rather than by subtraction, which leaves roundoff
    # where the true error term is zero
    resid = x - x.mean(axis=1, keepdims=True) - x.mean(axis=0, keepdims=True) + grand
    ss_err = 0.0 if np.all(x == x[:, :1]) else float(np.sum(resid**2))
    return {
        "n": n, "k": k,
        "ms_r": ss_rows / (n - 1),
        "ms_c": ss_cols / (k - 1),
        "ms_e": ss_err / ((n - 1) * (k - 1)),
    }


def icc_absolute(ratings, model: str = "two_way_mixed", alpha: float = 0.05):
    """Single-measure absolute-agreement ICC(A,1) with its F-based confidence interval.

    The point estimate is the same for the mixed and random models; the CI
    follows McGraw & Wong (1996).  Returns ``(icc, (lo, hi))``.
    """
    if model not in ICC_MODELS:
        raise MetricError(f"model must be one of {ICC_MODELS}")
    x = ratings.values if isinstance(ratings, RatingsTable) else np.asarray(ratings, dtype=np.float64)
    a = anova_two_way(x)
    n, k, msr, msc, mse = a["n"], a["k"], a["ms_r"], a["ms_c"], a["ms_e"]
    if msr == 0:
        raise MetricError("ratings have zero between-subject variance; ICC undefined")
    denom = msr + (k - 1) * mse + (k / n) * (msc - mse)
    icc = (msr - mse) / denom
    if mse == 0:
        return float(icc), (float(icc), float(icc))
    # Satterthwaite degrees of freedom for the denominator mean square
    aa = k * icc / (n * (1 - icc)) if icc < 1 else math.inf
    bb = 1 + k * icc * (n - 1) / (n * (1 - icc)) if icc < 1 else math.inf
    if not math.isfinite(aa):
        return float(icc), (float(icc), float(icc))
    v = (aa * msc + bb * mse) ** 2 / ((aa * msc) ** 2 / (k - 1) + (bb * mse) ** 2 / ((n - 1) * (k - 1)))
    f_lo = stats.f.ppf(1 - alpha / 2, n - 1, v)
    f_hi = stats.f.ppf(1 - alpha / 2, v, n - 1)
    lo = n * (msr - f_lo * mse) / (f_lo * (k * msc + (k * n - k - n) * mse) + n * msr)
    hi = n * (f_hi * msr - mse) / (k * msc + (k * n - k - n) * mse + n * f_hi * msr)
    return float(icc), (float(lo), float(hi))


def mad(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise MetricError("mad of empty vectors")
    if a.shape != b.shape:
        raise MetricError(f"mad: length mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def sem(sd_pooled: float, icc: float) -> float:
    if not 0 <= icc <= 1:
        raise MetricError(f"icc {icc} outside [0, 1] for SEM")
    return float(sd_pooled * math.sqrt(1 - icc))


def reliability_report(table: RatingsTable, model: str = "two_way_mixed") -> dict:
    """ICC with CI, MAD between the first two columns, SEM from the pooled SD of all ratings."""
    icc, (lo, hi) = icc_absolute(table, model)
    sd = float(np.std(table.values, ddof=1))
    return {
        "region": table.region,
        "model": model,
        "n_subjects": int(table.values.shape[0]),
        "n_raters": int(table.values.shape[1]),
        "icc": icc,
        "ci95": [lo, hi],
        "mad": mad(table.values[:, 0], table.values[:, 1]),
        "sem": sem(sd, min(max(icc, 0.0), 1.0)),
        "sd_pooled": sd,
    }


# -- reports ------------------------------------------------------------------
def case_metrics(img, mask, reference: Optional[np.ndarray] = None) -> dict:
    out = {"snr_db": snr(img, mask), "cnr_db": cnr(img, mask)}
    if reference is not None:
        out["psnr_db"] = psnr(img, reference)
        value, scales = ms_ssim(img, reference, return_scales=True)
        out["ms_ssim"] = value
        out["ms_ssim_scales"] = scales
    return out


@dataclass
class QualityReport:
    cases: dict = field(default_factory=dict)  # case id -> metrics dict
    errors: dict = field(default_factory=dict)  # case id -> message

    METRICS = ("ms_ssim", "psnr_db", "snr_db", "cnr_db")

    def add(self, case_id: str, metrics: dict):
        self.cases[case_id] = metrics

    def aggregate(self) -> dict:
        agg = {}
        for m in self.METRICS:
            vals = np.array([c[m] for c in self.cases.values() if m in c], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if len(vals):
                agg[m] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(len(vals))}
        return agg

    def to_dict(self) -> dict:
        return {"cases": self.cases, "aggregate": self.aggregate(), "errors": self.errors}

    def write(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.json`` and ``<stem>.tsv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        js = stem.with_suffix(".json")
        js.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_json_default))
        tsv = stem.with_suffix(".tsv")
        lines = ["case_id\t" + "\t".join(self.METRICS)]
        for cid in sorted(self.cases):
            c = self.cases[cid]
            lines.append(cid + "\t" + "\t".join(_fmt(c.get(m)) for m in self.METRICS))
        agg = self.aggregate()
        lines.append("mean\t" + "\t".join(_fmt(agg.get(m, {}).get("mean")) for m in self.METRICS))
        lines.append("std\t" + "\t".join(_fmt(agg.get(m, {}).get("std")) for m in self.METRICS))
        tsv.write_text("\n".join(lines) + "\n")
        return js, tsv


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
