"""Bidirectional training of a :class:`~invcc.flow.FlowModel`.

The total loss is ``lam * L_f + L_r``.  ``L_f`` compares sum-of-squares images
of the compressed output and the compression target; ``L_r`` compares the
recovered coils with the originals channel by channel.  Both use a mean
smooth-L1 penalty.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import classic
from .flow import FlowModel, augment_average, n_groups, pad_coils
from .ndcore import centered_fft2, sos_array, split_complex_array

logger = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    IMAGE = "image"
    KSPACE = "kspace"

    @classmethod
    def parse(cls, value):
        aliases = {"i": cls.IMAGE, "k": cls.KSPACE}
        return aliases.get(value, None) or cls(value)


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    variant: Variant = Variant.KSPACE
    lam: float = 1.0
    lr: float = 1e-4
    lr_halving_epochs: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    batch: int = 1
    seed: int = 0
    target: str = "scc_sos"
    reverse_input: str = "self"
    n_blocks: int = 4
    growth: int = 16
    clamp: float = 2.0
    divergence_threshold: float = 1e6

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}; choose from {sorted(TARGETS)}")
        if self.reverse_input not in ("teacher", "self"):
            raise ValueError("reverse_input must be 'teacher' or 'self'")

    # "lambda" is the natural key in config files
    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d


# --- losses -------------------------------------------------------------------


def smooth_l1(a, b):
    """Mean of ``0.5 d^2`` (``|d| < 1``) or ``|d| - 0.5`` over ``d = a - b``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if isinstance(a, torch.Tensor):
        return F.smooth_l1_loss(a, b, beta=1.0)
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return float(np.mean(np.where(d < 1.0, 0.5 * d * d, d - 0.5)))


def loss_forward_image(x_hat, x_ref):
    return smooth_l1(sos_array(x_hat), sos_array(x_ref))


def loss_forward_kspace(x_hat_k, x_ref_k):
    return smooth_l1(sos_array(centered_fft2(x_hat_k, inverse=True)), sos_array(centered_fft2(x_ref_k, inverse=True)))


def loss_reverse(x_rec, x):
    return smooth_l1(split_complex_array(x_rec), split_complex_array(x))


def forward_loss(variant: Variant):
    return loss_forward_kspace if Variant(variant) is Variant.KSPACE else loss_forward_image


def to_image(x, variant: Variant):
    return centered_fft2(x, inverse=True) if Variant(variant) is Variant.KSPACE else x


# --- compression targets --------------------------------------------------------


def _target_scc(x, n_virtual, variant):
    return classic.compress_apply(x, classic.scc_fit(x, n_virtual))


def _target_scc_sos(x, n_virtual, variant):
    # SCC virtual coils with each pixel rescaled so their sum of squares matches
    # the full-coil sum of squares; the rescale happens in the image domain.
    y = to_image(_target_scc(x, n_virtual, variant), variant)
    ref = sos_array(to_image(x, variant))
    got = sos_array(y)
    gain = np.divide(ref, got, out=np.ones_like(ref), where=got > 1e-12 * max(ref.max(), 1e-300))
    y = y * gain[..., None, :, :]
    return centered_fft2(y) if Variant(variant) is Variant.KSPACE else y


def _target_average(x, n_virtual, variant):
    return augment_average(np.asarray(x), x.shape[-3], n_virtual)


TARGETS = {"scc": _target_scc, "scc_sos": _target_scc_sos, "average": _target_average}


def make_target(x, n_virtual, variant=Variant.KSPACE, kind="scc_sos"):
    """Compression target for one slice ``(C, H, W)`` in the variant's domain."""
    return TARGETS[kind](np.asarray(x), n_virtual, Variant(variant))


@dataclass
class TrainingPair:
    x: np.ndarray
    y_target: np.ndarray


def make_pairs(xs, n_virtual, variant=Variant.KSPACE, kind="scc_sos"):
    return [TrainingPair(np.asarray(x), make_target(x, n_virtual, variant, kind)) for x in xs]


def loss_total(model: FlowModel, x, y_target, cfg: TrainConfig):
    """Returns ``(total, {"forward": L_f, "reverse": L_r})`` as torch scalars."""
    x = model._as_tensor(x)
    y_target = model._as_tensor(y_target)
    if x.ndim == 3:
        x, y_target = x[None], y_target[None]
    compressed = model.compress(x)
    lf = forward_loss(cfg.variant)(compressed, y_target)
    source = y_target if cfg.reverse_input == "teacher" else compressed
    lr = loss_reverse(model.recover(source), x)
    return cfg.lam * lf + lr, {"forward": lf, "reverse": lr}


def group_consistency(model: FlowModel, x, variant=Variant.KSPACE) -> float:
    """Largest RMS difference between the sum-of-squares images of any two output groups."""
    with torch.no_grad():
        y, _ = model(model._as_tensor(x if np.ndim(x) == 4 else np.asarray(x)[None]))
        y = to_image(y, variant)
        g, n = model.groups, model.n_virtual
        groups = [sos_array(y[:, i * n : (i + 1) * n]) for i in range(g)]
        worst = 0.0
        for a, b in itertools.combinations(groups, 2):
            worst = max(worst, float(torch.sqrt(torch.mean((a - b) ** 2))))
    return worst


# --- gradients and Adam -------------------------------------------------------


def _locate_nonfinite(model: FlowModel, x):
    h = model._as_tensor(x)
    if h.ndim == 3:
        h = h[None]

    h = split_complex_array(pad_coils(h, model.n_physical, model.n_virtual))
    with torch.no_grad():
        for i, block in enumerate(model.blocks):
            h, _ = block(h)
            if not torch.isfinite(h).all():
                return f"block {i}"
    return "loss head"


def grad(model: FlowModel, x, y_target, cfg: TrainConfig):
    """Reverse-mode gradient of :func:`loss_total` for every named parameter."""
    params = dict(model.named_parameters())
    total, parts = loss_total(model, x, y_target, cfg)
    if not torch.isfinite(total):
        raise NonFiniteError(f"non-finite loss, first bad activation in {_locate_nonfinite(model, x)}")
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = torch.zeros_like(p) if g is None else g
    return out, total, parts


class _LossModule(torch.nn.Module):
    def __init__(self, model, cfg):
        super().__init__()
        self.model = model
        self.cfg = cfg

    def forward(self, x, y):
        return loss_total(self.model, x, y, self.cfg)[0]


def flat_parameters(model: FlowModel) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def finite_difference_gradient(model: FlowModel, x, y_target, cfg: TrainConfig, step=1e-3, indices=None, chunk=256):
    """Central differences of :func:`loss_total` along parameter coordinates.

    Only forward evaluations are used, batched with ``torch.func.vmap``.
    ``indices`` selects coordinates of the flattened parameter vector (all by default).
    """
    from torch.func import functional_call, vmap

    wrapper = _LossModule(model, cfg)
    names = [f"model.{n}" for n, _ in model.named_parameters()]
    shapes = [p.shape for p in model.parameters()]
    sizes = [p.numel() for p in model.parameters()]
    theta = flat_parameters(model)
    x = model._as_tensor(x)
    y_target = model._as_tensor(y_target)
    if x.ndim == 3:
        x, y_target = x[None], y_target[None]

    def loss_at(th):
        parts = torch.split(th, sizes)
        params = {n: t.reshape(s) for n, t, s in zip(names, parts, shapes)}
        return functional_call(wrapper, params, (x, y_target))

    batched = vmap(loss_at)
    idx = torch.arange(theta.numel()) if indices is None else torch.as_tensor(indices)
    out = torch.empty(len(idx), dtype=theta.dtype)
    with torch.no_grad():
        for start in range(0, len(idx), chunk):
            sel = idx[start : start + chunk]
            rows = torch.arange(len(sel))
            plus = theta.repeat(len(sel), 1)
            minus = theta.repeat(len(sel), 1)
            plus[rows, sel] += step
            minus[rows, sel] -= step
            out[start : start + len(sel)] = (batched(plus) - batched(minus)) / (2 * step)
    return out


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """Bias-corrected Adam update, in place on ``params``."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    return state


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate halved every ``lr_halving_epochs`` epochs."""
    if cfg.lr_halving_epochs <= 0:
        return cfg.lr
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_epochs)


TRACE_FIELDS = ("step", "epoch", "lr", "L_f", "L_r", "total", "group_consistency")


def train(model: FlowModel, dataset, cfg: TrainConfig, consistency_every: int = 0, callback=None):
    """Adam over ``dataset`` (a list of :class:`TrainingPair`), one slice per step.

    Returns ``(model, trace)`` where ``trace`` is a list of dicts keyed by
    :data:`TRACE_FIELDS`.  ``group_consistency`` is filled every
    ``consistency_every`` steps (NaN otherwise).
    """
    if not dataset:
        raise ValueError("empty training set")
    params = dict(model.named_parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    trace = []
    step = 0
    total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * math.ceil(len(dataset) / cfg.batch)
    epoch = 0
    while step < total_steps:
        lr = learning_rate(cfg, epoch)
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch):
            if step >= total_steps:
                break
            idx = order[start : start + cfg.batch]
            x = np.stack([dataset[i].x for i in idx])
            y = np.stack([dataset[i].y_target for i in idx])
            grads, total, parts = grad(model, x, y, cfg)
            value = float(total.detach())
            if value > cfg.divergence_threshold:
                raise TrainingDiverged(f"loss {value:.3g} exceeded {cfg.divergence_threshold:g} at step {step}")
            adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            gc = math.nan
            if consistency_every and step % consistency_every == 0:
                gc = group_consistency(model, x, cfg.variant)
            row = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "L_f": float(parts["forward"].detach()),
                "L_r": float(parts["reverse"].detach()),
                "total": value,
                "group_consistency": gc,
            }
            trace.append(row)
            if callback is not None:
                callback(row, model)
            step += 1
        epoch += 1
    logger.info("trained %d steps, final loss %.4g", step, trace[-1]["total"] if trace else math.nan)
    return model, trace


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
