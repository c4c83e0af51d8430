"""Synthetic multi-coil phantoms, Cartesian undersampling and the ``.mcs`` file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .ndcore import ComplexImage, Domain, DomainError

MCS_MAGIC = b"MCS1"
_MCS_HEADER = struct.Struct("<4s3I")
_U32_MAX = 2**32 - 1


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates: the field of view spans [-1, 1] on both axes."""

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float  # radians, counter-clockwise from the column axis
    intensity: float


# Shepp-Logan layout with nonnegative, additive intensities.
SHEPP_LOGAN = (
    Ellipse((0.0, 0.0), (0.69, 0.92), 0.0, 0.35),
    Ellipse((0.0, -0.0184), (0.6624, 0.874), 0.0, 0.1),
    Ellipse((0.22, 0.0), (0.11, 0.31), math.radians(-18), 0.3),
    Ellipse((-0.22, 0.0), (0.16, 0.41), math.radians(18), 0.25),
    Ellipse((0.0, 0.35), (0.21, 0.25), 0.0, 0.2),
    Ellipse((0.0, 0.1), (0.046, 0.046), 0.0, 0.3),
    Ellipse((0.0, -0.1), (0.046, 0.046), 0.0, 0.3),
    Ellipse((-0.08, -0.605), (0.046, 0.023), 0.0, 0.2),
    Ellipse((0.0, -0.605), (0.023, 0.023), 0.0, 0.2),
    Ellipse((0.06, -0.605), (0.023, 0.046), 0.0, 0.2),
)


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 64
    width: int = 64
    coils: int = 8
    ellipses: tuple[Ellipse, ...] = SHEPP_LOGAN
    coil_radius: float = 0.6  # fraction of the field of view
    sensitivity_width: float = 22.0  # Gaussian sigma, pixels
    seed: int = 0

    def __post_init__(self):
        if self.coils < 2:
            raise ValueError(f"a phantom needs at least 2 coils, got {self.coils}")
        if self.height < 1 or self.width < 1:
            raise ValueError("height and width must be positive")
        if self.sensitivity_width <= 0:
            raise ValueError("sensitivity_width must be > 0")
        for e in self.ellipses:
            if not 0.0 <= e.intensity <= 1.0:
                raise ValueError(f"ellipse intensity {e.intensity} outside [0, 1]")
        object.__setattr__(self, "ellipses", tuple(self.ellipses))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        d["ellipses"] = tuple(
            Ellipse(tuple(e["center"]), tuple(e["axes"]), e["angle"], e["intensity"])
            for e in d.get("ellipses", ())
        )
        return cls(**d)


def _normalized_grid(h, w):
    # Symmetric about the image center so that mirrored pixels get exactly negated coordinates.
    y = (2.0 * np.arange(h) - (h - 1)) / max(h - 1, 1)
    x = (2.0 * np.arange(w) - (w - 1)) / max(w - 1, 1)
    return np.meshgrid(y, x, indexing="ij")


def ellipse_image(spec: PhantomSpec) -> np.ndarray:
    """The single-channel real phantom, shape ``(height, width)``."""
    yy, xx = _normalized_grid(spec.height, spec.width)
    out = np.zeros((spec.height, spec.width))
    for e in spec.ellipses:
        dx, dy = xx - e.center[0], yy - e.center[1]
        c, s = math.cos(e.angle), math.sin(e.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        inside = (u / e.axes[0]) ** 2 + (v / e.axes[1]) ** 2 <= 1.0
        out[inside] += e.intensity
    return out


def make_sensitivities(spec: PhantomSpec) -> ComplexImage:
    """Gaussian coil profiles on a ring with a random linear phase per coil.

    Magnitudes are normalized so that the per-pixel sum of squares is one.
    """
    h, w, nc = spec.height, spec.width, spec.coils
    rows = np.arange(h) - (h - 1) / 2.0
    cols = np.arange(w) - (w - 1) / 2.0
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    radius = spec.coil_radius * max(h, w)
    angles = 2.0 * np.pi * np.arange(nc) / nc
    cx = radius * np.cos(angles)
    cy = radius * np.sin(angles)
    d2 = (xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2
    log_mag = -d2 / (2.0 * spec.sensitivity_width**2)
    # normalize in the log domain; far-away coils underflow otherwise
    log_norm = 0.5 * np.logaddexp.reduce(2.0 * log_mag, axis=0)
    mag = np.exp(log_mag - log_norm[None])

    rng = np.random.default_rng(spec.seed)
    phase0 = rng.uniform(-np.pi, np.pi, nc)
    slopes = rng.uniform(-np.pi / 2, np.pi / 2, (nc, 2))
    ny, nx = _normalized_grid(h, w)
    phase = phase0[:, None, None] + slopes[:, 0, None, None] * nx[None] + slopes[:, 1, None, None] * ny[None]
    return ComplexImage(mag * np.exp(1j * phase), Domain.IMAGE)


def make_phantom(spec: PhantomSpec, sensitivities=None) -> ComplexImage:
    """Ellipse phantom weighted by each coil sensitivity, image domain."""
    if sensitivities is None:
        sensitivities = make_sensitivities(spec).data
    elif isinstance(sensitivities, ComplexImage):
        sensitivities = sensitivities.data
    rho = ellipse_image(spec)
    return ComplexImage(rho[None] * np.asarray(sensitivities), Domain.IMAGE)


def add_noise(img: ComplexImage, sigma: float, rng: np.random.Generator) -> ComplexImage:
    if sigma <= 0:
        return img
    noise = rng.normal(0.0, sigma, img.data.shape) + 1j * rng.normal(0.0, sigma, img.data.shape)
    return img.with_data(img.data + noise)


def jitter_ellipses(ellipses, rng: np.random.Generator, amount: float = 1.0):
    """Randomly perturb an ellipse layout; used to build varied slices of one 'subject'."""
    out = []
    for e in ellipses:
        center = tuple(float(c + rng.normal(0.0, 0.03 * amount)) for c in e.center)
        axes = tuple(float(a * rng.uniform(1 - 0.1 * amount, 1 + 0.1 * amount)) for a in e.axes)
        angle = float(e.angle + rng.normal(0.0, 0.1 * amount))
        intensity = float(np.clip(e.intensity * rng.uniform(1 - 0.2 * amount, 1 + 0.2 * amount), 0.0, 1.0))
        out.append(Ellipse(center, axes, angle, intensity))
    return tuple(out)


def make_dataset(n_slices, height=64, width=64, coils=8, seed=0, noise=0.0, domain=Domain.KSPACE, slice_seed=None):
    """Slices of jittered phantoms seen through one fixed coil array.

    ``seed`` fixes the coil array; ``slice_seed`` (default ``seed``) draws the
    anatomy, so held-out slices share coils with a training set.

    Returns a complex array ``(n_slices, coils, height, width)`` in ``domain``.
    """
    base = PhantomSpec(height=height, width=width, coils=coils, seed=seed)
    sens = make_sensitivities(base).data
    rng = np.random.default_rng([seed if slice_seed is None else slice_seed, 1])
    slices = []
    for _ in range(n_slices):
        spec = replace(base, ellipses=jitter_ellipses(base.ellipses, rng))
        img = add_noise(make_phantom(spec, sens), noise, rng)
        slices.append(img.data)
    out = np.stack(slices)
    if Domain(domain) is Domain.KSPACE:
        from .ndcore import centered_fft2

        out = centered_fft2(out)
    return out


@dataclass(frozen=True)
class SamplingMask:
    height: int
    width: int
    kept_lines: tuple[int, ...]
    acceleration: int
    acs_lines: int

    def array(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[:, list(self.kept_lines)] = True
        return m

    @property
    def acs_columns(self) -> tuple[int, ...]:
        start = self.width // 2 - self.acs_lines // 2
        return tuple(range(start, start + self.acs_lines))


def make_mask(h: int, w: int, R: int, acs: int) -> SamplingMask:
    """Every ``R``-th phase-encode column plus a centered block of ``acs`` columns."""
    if R < 1:
        raise ValueError(f"acceleration must be >= 1, got {R}")
    if not 1 <= acs <= w:
        raise ValueError(f"ACS block of {acs} lines does not fit in width {w}")
    start = w // 2 - acs // 2
    kept = set(range(0, w, R)) | set(range(start, start + acs))
    return SamplingMask(h, w, tuple(sorted(kept)), R, acs)


def apply_mask(ksp: ComplexImage, mask: SamplingMask) -> ComplexImage:
    if ksp.domain is not Domain.KSPACE:
        raise DomainError("undersampling applies to k-space data")
    if (ksp.height, ksp.width) != (mask.height, mask.width):
        raise ValueError("mask shape does not match data")
    return ksp.with_data(ksp.data * mask.array()[None])


# --- .mcs files -------------------------------------------------------------


class McsFormatError(ValueError):
    pass


class BadMagicError(McsFormatError):
    pass


class TruncatedFileError(McsFormatError):
    pass


class DimensionOverflowError(McsFormatError):
    pass


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_mcs(path, img: ComplexImage, meta: dict | None = None) -> None:
    """Write ``img`` as complex64 plus a JSON sidecar holding the domain tag."""
    c, h, w = img.data.shape
    if max(c, h, w) > _U32_MAX or 8 * c * h * w > 2**63:
        raise DimensionOverflowError(f"shape {img.data.shape} does not fit the header")
    payload = np.ascontiguousarray(img.data, dtype="<c8").tobytes()
    with open(path, "wb") as f:
        f.write(_MCS_HEADER.pack(MCS_MAGIC, c, h, w))
        f.write(payload)
    doc = {"domain": img.domain.value}
    doc.update(meta or {})
    meta_path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_mcs_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MCS_MAGIC:
        raise BadMagicError(f"{path}: not an MCS1 file")
    if len(raw) < _MCS_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, c, h, w = _MCS_HEADER.unpack_from(raw)
    if min(c, h, w) == 0:
        raise DimensionOverflowError(f"{path}: zero dimension in header ({c}, {h}, {w})")
    n = c * h * w
    if 8 * n > 2**63:
        raise DimensionOverflowError(f"{path}: declared payload overflows")
    expected = _MCS_HEADER.size + 8 * n
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise McsFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<c8", offset=_MCS_HEADER.size, count=n)
    return data.reshape(c, h, w)


def load_mcs(path, domain=None) -> ComplexImage:
    """Read an ``.mcs`` file; the domain comes from ``domain`` or the sidecar, else image."""
    data = read_mcs_array(path)
    if domain is None:
        mp = meta_path(path)
        domain = json.loads(mp.read_text()).get("domain", "image") if mp.exists() else Domain.IMAGE
    return ComplexImage(data.astype(np.complex128), Domain(domain))


def load_meta(path) -> dict:
    mp = meta_path(path)
    return json.loads(mp.read_text()) if mp.exists() else {}
