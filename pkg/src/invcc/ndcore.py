"""Multi-coil complex images, centered 2-D FFTs and sum-of-squares combination.

Arrays are laid out ``(coil, row, col)``; a leading batch axis is allowed by the
array-level helpers.  The helpers accept either numpy arrays or torch tensors so
that the training losses can differentiate through the same transforms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch


class Domain(str, enum.Enum):
    IMAGE = "image"
    KSPACE = "kspace"


class DomainError(ValueError):
    """Raised when an operation receives data in the wrong domain."""


@dataclass(frozen=True)
class ComplexImage:
    """One multi-coil slice, ``data`` has shape ``(coils, height, width)``."""

    data: np.ndarray
    domain: Domain = Domain.IMAGE

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"expected (coils, height, width) data, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"empty dimension in shape {data.shape}")
        object.__setattr__(self, "data", data.astype(np.complex128, copy=False))
        object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def coils(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def with_data(self, data, domain=None) -> "ComplexImage":
        return ComplexImage(data, self.domain if domain is None else domain)


def _require(img: ComplexImage, domain: Domain):
    if img.domain is not domain:
        raise DomainError(f"expected {domain.value} data, got {img.domain.value}")


def centered_fft2(x, inverse=False):
    """Orthonormal centered 2-D (I)FFT over the last two axes.

    Works on numpy arrays and torch tensors.  ``ifftshift`` before and
    ``fftshift`` after, so the DC bin sits at ``floor(n/2)`` for odd and even
    sizes alike.
    """
    if isinstance(x, torch.Tensor):
        fn = torch.fft.ifft2 if inverse else torch.fft.fft2
        x = torch.fft.ifftshift(x, dim=(-2, -1))
        x = fn(x, dim=(-2, -1), norm="ortho")
        return torch.fft.fftshift(x, dim=(-2, -1))
    fn = np.fft.ifft2 if inverse else np.fft.fft2
    x = np.fft.ifftshift(x, axes=(-2, -1))
    x = fn(x, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


def centered_fft1(x, axis, inverse=False):
    """Orthonormal centered 1-D (I)FFT along ``axis`` (numpy only)."""
    fn = np.fft.ifft if inverse else np.fft.fft
    x = np.fft.ifftshift(x, axes=axis)
    x = fn(x, axis=axis, norm="ortho")
    return np.fft.fftshift(x, axes=axis)


def fft2c(img: ComplexImage) -> ComplexImage:
    _require(img, Domain.IMAGE)
    return ComplexImage(centered_fft2(img.data), Domain.KSPACE)


def ifft2c(ksp: ComplexImage) -> ComplexImage:
    _require(ksp, Domain.KSPACE)
    return ComplexImage(centered_fft2(ksp.data, inverse=True), Domain.IMAGE)


def sos_array(x, coil_axis=-3):
    """Root sum of squared magnitudes across ``coil_axis``."""
    if isinstance(x, torch.Tensor):
        # vector_norm's backward uses a zero subgradient at zero-valued pixels
        return torch.linalg.vector_norm(x, dim=coil_axis)
    return np.sqrt(np.sum(np.abs(x) ** 2, axis=coil_axis))


def sos(img: ComplexImage) -> np.ndarray:
    """Per-pixel sum-of-squares combination, returns a real ``(height, width)`` image."""
    _require(img, Domain.IMAGE)
    return sos_array(img.data, coil_axis=0)


def split_complex_array(x):
    """``(..., C, H, W)`` complex -> ``(..., 2C, H, W)`` real, interleaved re/im."""
    if isinstance(x, torch.Tensor):
        r = torch.view_as_real(x)  # (..., C, H, W, 2)
        r = r.movedim(-1, -3)  # (..., C, 2, H, W)
        return r.reshape(*x.shape[:-3], 2 * x.shape[-3], *x.shape[-2:])
    r = np.stack([x.real, x.imag], axis=-3)
    return r.reshape(*x.shape[:-3], 2 * x.shape[-3], *x.shape[-2:])


def merge_complex_array(x):
    """Inverse of :func:`split_complex_array`."""
    c2 = x.shape[-3]
    if c2 % 2:
        raise ValueError(f"odd real channel count {c2} cannot be merged into complex channels")
    shape = (*x.shape[:-3], c2 // 2, 2, *x.shape[-2:])
    if isinstance(x, torch.Tensor):
        r = x.reshape(shape).movedim(-3, -1).contiguous()
        return torch.view_as_complex(r)
    r = x.reshape(shape)
    return r[..., 0, :, :] + 1j * r[..., 1, :, :]


def split_complex(img: ComplexImage) -> np.ndarray:
    return split_complex_array(img.data)


def merge_complex(stack, domain=Domain.IMAGE) -> ComplexImage:
    return ComplexImage(merge_complex_array(np.asarray(stack)), domain)
