"""SCC and GCC coil compression.

SCC fits one row-orthonormal ``N x C`` matrix to every k-space sample.  GCC
inverse-transforms the fully sampled readout axis (rows) and fits one matrix per
readout location, then aligns neighbouring matrices so the virtual coils vary
smoothly along the readout.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .ndcore import ComplexImage, Domain, DomainError, centered_fft1

CCM_MAGIC = b"CCM1"
_CCM_HEADER = struct.Struct("<4sB3I")


class Mode(enum.IntEnum):
    SCC = 0
    GCC = 1


@dataclass(frozen=True)
class CompressionMatrix:
    """Row-orthonormal compression matrices, ``matrices`` has shape ``(locations, N, C)``."""

    mode: Mode
    matrices: np.ndarray

    @property
    def n_virtual(self) -> int:
        return self.matrices.shape[1]

    @property
    def n_physical(self) -> int:
        return self.matrices.shape[2]

    @property
    def per_location(self) -> list[np.ndarray]:
        return list(self.matrices)


def _as_kspace_array(x):
    if isinstance(x, ComplexImage):
        if x.domain is not Domain.KSPACE:
            raise DomainError("coil compression is fitted and applied on k-space data")
        return x.data
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError(f"expected (..., coils, height, width) data, got shape {x.shape}")
    return x


def _wrap_like(x, data):
    return x.with_data(data) if isinstance(x, ComplexImage) else data


def _check_n_virtual(n_virtual, coils):
    if not 1 <= n_virtual <= coils:
        raise ValueError(f"cannot compress {coils} coils into {n_virtual} virtual coils")


def _coil_samples(x, columns=None):
    """``(..., C, H, W)`` -> ``(C, samples)`` matrix, optionally restricted to columns."""
    if columns is not None:
        x = x[..., list(columns)]
    x = np.moveaxis(x, -3, 0)
    return x.reshape(x.shape[0], -1)


def _top_left_singular(m, n_virtual):
    u, _, _ = np.linalg.svd(m, full_matrices=False)
    return u[:, :n_virtual].conj().T


def scc_fit(ksp, n_virtual: int, calib_columns=None) -> CompressionMatrix:
    """Global PCA compression matrix from the top left singular vectors of the coil-sample matrix."""
    x = _as_kspace_array(ksp)
    _check_n_virtual(n_virtual, x.shape[-3])
    m = _coil_samples(x, calib_columns)
    if not np.any(m):
        raise ValueError("cannot fit a compression matrix to all-zero data")
    a = _top_left_singular(m, n_virtual)
    return CompressionMatrix(Mode.SCC, a[None])


def _procrustes_align(a, ref):
    """Rotate the rows of ``a`` (unitary N x N mixing) to best match ``ref``."""
    u, _, vh = np.linalg.svd(ref @ a.conj().T)
    return (u @ vh) @ a


def hybrid(ksp):
    """Inverse FFT along the readout (row) axis only."""
    return centered_fft1(ksp, axis=-2, inverse=True)


def unhybrid(x):
    return centered_fft1(x, axis=-2)


def gcc_fit(ksp, n_virtual: int, calib_columns=None, align: bool = True) -> CompressionMatrix:
    """Per-readout-location SVD compression, aligned outward from the center row."""
    x = _as_kspace_array(ksp)
    _check_n_virtual(n_virtual, x.shape[-3])
    if not np.any(x):
        raise ValueError("cannot fit a compression matrix to all-zero data")
    hx = hybrid(x)
    if calib_columns is not None:
        hx = hx[..., list(calib_columns)]
    h = hx.shape[-2]
    mats = np.empty((h, n_virtual, hx.shape[-3]), dtype=np.complex128)
    for i in range(h):
        mats[i] = _top_left_singular(_coil_samples(hx[..., i : i + 1, :]), n_virtual)
    if align:
        center = h // 2
        for i in range(center + 1, h):
            mats[i] = _procrustes_align(mats[i], mats[i - 1])
        for i in range(center - 1, -1, -1):
            mats[i] = _procrustes_align(mats[i], mats[i + 1])
    return CompressionMatrix(Mode.GCC, mats)


def _apply(x, a: CompressionMatrix, adjoint: bool):
    data = _as_kspace_array(x)
    mats = a.matrices.conj().transpose(0, 2, 1) if adjoint else a.matrices
    expect = mats.shape[2]
    if data.shape[-3] != expect:
        raise ValueError(f"data has {data.shape[-3]} coils, matrix expects {expect}")
    if a.mode is Mode.SCC:
        out = np.einsum("nc,...chw->...nhw", mats[0], data)
    else:
        if data.shape[-2] != mats.shape[0]:
            raise ValueError(f"data has {data.shape[-2]} readout locations, matrix has {mats.shape[0]}")
        out = unhybrid(np.einsum("hnc,...chw->...nhw", mats, hybrid(data)))
    return _wrap_like(x, out)


def compress_apply(x, a: CompressionMatrix):
    """Virtual coils ``A x`` per sample (per readout location for GCC)."""
    return _apply(x, a, adjoint=False)


def decompress_apply(y, a: CompressionMatrix):
    """Approximate physical coils ``A^H y``."""
    return _apply(y, a, adjoint=True)


def compression_error(x, a: CompressionMatrix) -> float:
    """Sum over samples of ``||(A^H A - I) x||^2``."""
    data = _as_kspace_array(x)
    resid = data - _as_kspace_array(decompress_apply(compress_apply(data, a), a))
    return float(np.sum(np.abs(resid) ** 2))


def save_ccm(path, a: CompressionMatrix) -> None:
    loc, n, c = a.matrices.shape
    with open(path, "wb") as f:
        f.write(_CCM_HEADER.pack(CCM_MAGIC, int(a.mode), n, c, loc))
        f.write(np.ascontiguousarray(a.matrices, dtype="<c8").tobytes())


def load_ccm(path) -> CompressionMatrix:
    from .datagen import BadMagicError, TruncatedFileError

    raw = open(path, "rb").read()
    if raw[:4] != CCM_MAGIC:
        raise BadMagicError(f"{path}: not a CCM1 file")
    if len(raw) < _CCM_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, mode, n, c, loc = _CCM_HEADER.unpack_from(raw)
    count = n * c * loc
    if len(raw) != _CCM_HEADER.size + 8 * count:
        raise TruncatedFileError(f"{path}: payload size does not match header")
    mats = np.frombuffer(raw, dtype="<c8", offset=_CCM_HEADER.size, count=count)
    return CompressionMatrix(Mode(mode), mats.reshape(loc, n, c).astype(np.complex128))
