"""Input checks shared by the estimator front end."""

from __future__ import annotations

import numbers

import numpy as np

from .ndcore import ComplexImage


def check_coil_array(X, n_coils=None, name="X"):
    """Return ``(array, single)`` with ``array`` complex of shape ``(n, C, H, W)``.

    A single ``(C, H, W)`` slice or a :class:`ComplexImage` is promoted to a
    batch of one; ``single`` records that so outputs can be squeezed back.
    """
    if isinstance(X, ComplexImage):
        X = X.data
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (n_slices, coils, height, width), got {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"{name} has an empty axis: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinity")
    if n_coils is not None and arr.shape[1] != n_coils:
        raise ValueError(f"{name} has {arr.shape[1]} coils, estimator was fitted on {n_coils}")
    return arr.astype(np.complex128, copy=False), single


def check_n_virtual(n_virtual, n_physical):
    if not isinstance(n_virtual, numbers.Integral) or isinstance(n_virtual, bool):
        raise TypeError(f"n_virtual must be an integer, got {n_virtual!r}")
    if not 1 <= n_virtual <= n_physical:
        raise ValueError(f"n_virtual={n_virtual} must lie in [1, {n_physical}]")
    return int(n_virtual)


def check_choice(value, choices, name):
    if value not in choices:
        raise ValueError(f"{name}={value!r}; expected one of {sorted(choices)}")
    return value


def squeeze_single(arr, single):
    return arr[0] if single else arr
