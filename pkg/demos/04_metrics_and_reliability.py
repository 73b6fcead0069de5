"""
Image quality and rater agreement
=================================

SNR and CNR treat the dark spine shadows as signal.  The reliability
helpers compute ICC(A,1) with a 95% interval, the mean absolute
difference and the standard error of measurement for angle readings.
"""
import numpy as np

from morphdiff.metrics import RatingsTable, cnr, ms_ssim, psnr, reliability_report, snr

# two-region image: signal pixels alternate 0.1/0.3, background 0.7/0.9
mask = np.zeros((8, 8), dtype=np.uint8)
mask[:, :4] = 1
checker = np.add.outer(np.arange(8), np.arange(8)) % 2 == 1
img = np.where(mask > 0, np.where(checker, 0.1, 0.3), np.where(checker, 0.7, 0.9))
print(f"SNR {snr(img, mask):.3f} dB, CNR {cnr(img, mask):.3f} dB")

rng = np.random.default_rng(0)
a = rng.random((64, 64))
b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
value, scales = ms_ssim(a, b, return_scales=True)
print(f"PSNR {psnr(a, b):.2f} dB, MS-SSIM {value:.4f} using {scales} scales")

# twelve subjects measured by two raters
truth = rng.normal(25, 9, 12)
ratings = np.column_stack([truth + rng.normal(0, 1.5, 12), truth + rng.normal(0.5, 1.5, 12)])
report = reliability_report(RatingsTable(ratings, "thoracic"), "two_way_mixed")
lo, hi = report["ci95"]
print(f"ICC {report['icc']:.3f} [{lo:.3f}, {hi:.3f}], MAD {report['mad']:.2f} deg, SEM {report['sem']:.2f} deg")
