"""scikit-learn style front end: ``fit`` / ``transform`` / ``inverse_transform``.

Every estimator takes complex coil data shaped ``(n_slices, coils, height,
width)`` (a single slice is accepted too) and returns virtual coils with the
same layout.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import classic
from ._validation import check_choice, check_coil_array, check_n_virtual, squeeze_single
from .flow import FlowModel
from .train import TARGETS, TrainConfig, Variant, make_pairs, train


def _acs_columns(width, acs_lines):
    if not 1 <= acs_lines <= width:
        raise ValueError(f"acs_lines={acs_lines} does not fit width {width}")
    start = width // 2 - acs_lines // 2
    return range(start, start + acs_lines)


class _LinearCompressor(TransformerMixin, BaseEstimator):
    _fit_fn = None

    def __init__(self, n_virtual=4, calib="full", acs_lines=24):
        self.n_virtual = n_virtual
        self.calib = calib
        self.acs_lines = acs_lines

    def fit(self, X, y=None):
        X, _ = check_coil_array(X)
        self.n_physical_ = X.shape[1]
        n = check_n_virtual(self.n_virtual, self.n_physical_)
        cols = None
        if check_choice(self.calib, {"full", "acs"}, "calib") == "acs":
            cols = _acs_columns(X.shape[-1], self.acs_lines)
        self.matrix_ = type(self)._fit_fn(X, n, calib_columns=cols)
        return self

    def transform(self, X):
        check_is_fitted(self, "matrix_")
        X, single = check_coil_array(X, self.n_physical_)
        return squeeze_single(classic.compress_apply(X, self.matrix_), single)

    def inverse_transform(self, Y):
        check_is_fitted(self, "matrix_")
        Y, single = check_coil_array(Y, self.matrix_.n_virtual, name="Y")
        return squeeze_single(classic.decompress_apply(Y, self.matrix_), single)

    def compression_error(self, X):
        """``sum ||(A^H A - I) x||^2`` over all samples of ``X``."""
        check_is_fitted(self, "matrix_")
        X, _ = check_coil_array(X, self.n_physical_)
        return classic.compression_error(X, self.matrix_)

    def score(self, X, y=None):
        return -self.compression_error(X)


class SCCCompressor(_LinearCompressor):
    """Single global PCA compression matrix.

    Parameters
    ----------
    n_virtual : int
        Number of virtual coils.
    calib : {"full", "acs"}
        Fit on all k-space columns or only on a centered calibration block.
    acs_lines : int
        Width of the calibration block when ``calib="acs"``.
    """

    _fit_fn = staticmethod(classic.scc_fit)


class GCCCompressor(_LinearCompressor):
    """Per-readout-location compression matrices with alignment (same parameters as SCC)."""

    _fit_fn = staticmethod(classic.gcc_fit)


_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class FlowCompressor(TransformerMixin, BaseEstimator):
    """Invertible flow compression trained against a classic compression target.

    ``transform`` averages the flow's output groups into ``n_virtual`` coils and
    ``inverse_transform`` runs the exact inverse flow on the tiled result.

    Parameters
    ----------
    n_virtual : int
        Number of virtual coils.
    variant : {"kspace", "image"}
        Domain of the input data and of the training losses.
    n_blocks, growth, clamp : model size and coupling scale bound.
    lr, max_steps, epochs, lam : Adam step size, step budget (``max_steps`` wins
        when both are set), epoch count and forward-loss weight.
    target : {"scc_sos", "scc", "average"}
        What the compressed output is trained to match.
    reverse_input : {"self", "teacher"}
        Recover from the model's own compression or from the target.
    seed : int
    dtype : {"float32", "float64"}
    """

    def __init__(
        self,
        n_virtual=4,
        variant="kspace",
        n_blocks=4,
        growth=16,
        clamp=2.0,
        lr=1e-3,
        max_steps=500,
        epochs=1,
        lam=1.0,
        target="scc_sos",
        reverse_input="self",
        seed=0,
        dtype="float32",
    ):
        self.n_virtual = n_virtual
        self.variant = variant
        self.n_blocks = n_blocks
        self.growth = growth
        self.clamp = clamp
        self.lr = lr
        self.max_steps = max_steps
        self.epochs = epochs
        self.lam = lam
        self.target = target
        self.reverse_input = reverse_input
        self.seed = seed
        self.dtype = dtype

    def _config(self):
        return TrainConfig(
            variant=Variant.parse(self.variant),
            lam=self.lam,
            lr=self.lr,
            epochs=self.epochs,
            max_steps=self.max_steps,
            seed=self.seed,
            target=check_choice(self.target, set(TARGETS), "target"),
            reverse_input=self.reverse_input,
            n_blocks=self.n_blocks,
            growth=self.growth,
            clamp=self.clamp,
        )

    def fit(self, X, y=None):
        X, _ = check_coil_array(X)
        self.n_physical_ = X.shape[1]
        n = check_n_virtual(self.n_virtual, self.n_physical_)
        dtype = _DTYPES[check_choice(self.dtype, set(_DTYPES), "dtype")]
        cfg = self._config()
        self.model_ = FlowModel(
            self.n_physical_, n, cfg.n_blocks, cfg.growth, cfg.clamp, seed=self.seed, dtype=dtype
        )
        pairs = make_pairs(X, n, cfg.variant, cfg.target)
        _, self.trace_ = train(self.model_, pairs, cfg)
        self.loss_curve_ = [row["total"] for row in self.trace_]
        return self

    def _apply(self, method, X, n_coils, name):
        X, single = check_coil_array(X, n_coils, name=name)
        with torch.no_grad():
            out = getattr(self.model_, method)(self.model_._as_tensor(X))
        return squeeze_single(out.numpy().astype(np.complex128), single)

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self._apply("compress", X, self.n_physical_, "X")

    def inverse_transform(self, Y):
        check_is_fitted(self, "model_")
        return self._apply("recover", Y, self.model_.n_virtual, "Y")
