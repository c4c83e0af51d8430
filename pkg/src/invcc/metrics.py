"""PSNR and SSIM on sum-of-squares magnitude images."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .ndcore import ComplexImage, Domain, ifft2c, sos

K1 = 0.01
K2 = 0.03


def psnr(x, x_ref) -> float:
    """``20 log10(max(x_ref) / RMSE)``; ``inf`` for identical images."""
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_ref.shape}")
    peak = np.max(x_ref)
    if not np.any(x_ref):
        raise ValueError("PSNR undefined for an all-zero reference")
    rmse = math.sqrt(np.mean((x - x_ref) ** 2))
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / rmse)


def ssim(x, x_ref, windowed: bool = False, sigma: float = 1.5) -> float:
    """Structural similarity with dynamic range taken from ``max(x_ref)``.

    The default uses whole-image statistics.  ``windowed=True`` uses local
    Gaussian statistics (11x11 support at ``sigma=1.5``) averaged over the image.
    """
    x = np.asarray(x, dtype=np.float64)
    x_ref = np.asarray(x_ref, dtype=np.float64)
    if x.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_ref.shape}")
    dyn = float(np.max(x_ref))
    c1 = (K1 * dyn) ** 2
    c2 = (K2 * dyn) ** 2
    if windowed:
        blur = lambda a: gaussian_filter(a, sigma, truncate=5.0 / sigma, mode="reflect")  # noqa: E731
        mx, my = blur(x), blur(x_ref)
        vx = blur(x * x) - mx * mx
        vy = blur(x_ref * x_ref) - my * my
        cov = blur(x * x_ref) - mx * my
    else:
        mx, my = x.mean(), x_ref.mean()
        vx = np.mean((x - mx) ** 2)
        vy = np.mean((x_ref - my) ** 2)
        cov = np.mean((x - mx) * (x_ref - my))
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    if np.ndim(num) == 0 and den == 0.0:
        return 1.0  # both images identically zero
    return float(np.mean(num / den))


def _sos_image(img) -> np.ndarray:
    if isinstance(img, ComplexImage):
        return sos(ifft2c(img) if img.domain is Domain.KSPACE else img)
    return np.asarray(img, dtype=np.float64)


@dataclass
class MetricRow:
    method: str
    n_virtual: int
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "n_virtual", "psnr_db", "ssim"])
        for r in self.rows:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.6f}"
            w.writerow([r.method, r.n_virtual, p, f"{r.ssim:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())

    def __getitem__(self, method) -> MetricRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)


def evaluate(reference, candidates: dict, windowed_ssim: bool = False) -> MetricReport:
    """Score each candidate against the reference on sum-of-squares images.

    Both images are divided by the reference maximum before scoring.
    Candidates may be ComplexImages (any coil count, either domain) or real
    magnitude images.
    """
    ref = _sos_image(reference)
    scale = float(np.max(ref))
    if scale <= 0:
        raise ValueError("reference image is all zero")
    ref = ref / scale
    report = MetricReport()
    for method, cand in candidates.items():
        img = _sos_image(cand) / scale
        if img.shape != ref.shape:
            raise ValueError(f"candidate {method!r} has shape {img.shape}, reference {ref.shape}")
        n_virtual = cand.coils if isinstance(cand, ComplexImage) else 1
        report.rows.append(MetricRow(method, n_virtual, psnr(img, ref), ssim(img, ref, windowed_ssim)))
    return report
