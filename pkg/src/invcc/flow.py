"""Invertible flow for coil compression.

A :class:`FlowModel` is a stack of invertible blocks, each an LU-parameterized
1x1 convolution followed by an affine coupling layer whose first partition is
itself updated by an extra subnet ``r``.  Complex coils enter as interleaved
real/imaginary channels.  Compression keeps the channel count: the output is
read as ``G`` groups of ``N`` virtual coils which are averaged; recovery tiles
the ``N`` coils back to ``G`` groups and runs the exact inverse.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ndcore import ComplexImage, merge_complex_array, split_complex_array

CKPT_MAGIC = b"VICC0001"
LEAKY_SLOPE = 0.2
MIN_ABS_SCALE = 1e-12


class SingularInvConvError(ArithmeticError):
    pass


def _is_batched(t):
    # data-dependent checks cannot run under torch.func.vmap
    try:
        return torch._C._functorch.is_batchedtensor(t)
    except AttributeError:
        return False


class InvConv(nn.Module):
    """Invertible 1x1 convolution with ``W = P L (U + diag(s))``.

    ``P`` and the signs of ``s`` are fixed buffers; the strictly lower part of
    ``L``, the strictly upper part of ``U`` and ``log|s|`` are learned.
    """

    def __init__(self, channels, init="identity", generator=None, dtype=torch.float64):
        super().__init__()
        c = channels
        self.channels = c
        if init == "identity":
            p = torch.eye(c, dtype=dtype)
            lower = torch.zeros(c, c, dtype=dtype)
            upper = torch.zeros(c, c, dtype=dtype)
            s = torch.ones(c, dtype=dtype)
        elif init == "rotation":
            a = torch.randn(c, c, generator=generator, dtype=torch.float64)
            q, r = torch.linalg.qr(a)
            q = q * torch.sign(torch.diagonal(r))[None]
            p, lower, u = torch.linalg.lu(q)
            s = torch.diagonal(u).clone()
            upper = torch.triu(u, 1)
            p, lower, upper, s = (t.to(dtype) for t in (p, lower, upper, s))
        else:
            raise ValueError(f"unknown InvConv init {init!r}")
        self.register_buffer("perm", p)
        self.register_buffer("sign_s", torch.sign(s))
        self.register_buffer("lower_mask", torch.tril(torch.ones(c, c, dtype=dtype), -1))
        self.register_buffer("upper_mask", torch.triu(torch.ones(c, c, dtype=dtype), 1))
        self.lower = nn.Parameter(torch.tril(lower, -1))
        self.upper = nn.Parameter(torch.triu(upper, 1))
        self.log_s = nn.Parameter(torch.log(torch.abs(s)))

    def factors(self):
        eye = torch.eye(self.channels, dtype=self.log_s.dtype, device=self.log_s.device)
        lower = self.lower * self.lower_mask + eye
        upper = self.upper * self.upper_mask + torch.diag(self.sign_s * torch.exp(self.log_s))
        return self.perm, lower, upper

    def weight(self):
        p, lower, upper = self.factors()
        return p @ lower @ upper

    def forward(self, h):
        if h.shape[1] != self.channels:
            raise ValueError(f"InvConv expects {self.channels} channels, got {h.shape[1]}")
        out = torch.einsum("ij,bjhw->bihw", self.weight(), h)
        logdet = h.shape[2] * h.shape[3] * self.log_s.sum()
        return out, logdet.expand(h.shape[0])

    def inverse(self, v):
        if v.shape[1] != self.channels:
            raise ValueError(f"InvConv expects {self.channels} channels, got {v.shape[1]}")
        if not _is_batched(self.log_s) and torch.exp(self.log_s).min() < MIN_ABS_SCALE:
            raise SingularInvConvError("InvConv diagonal has |s| below 1e-12")
        p, lower, upper = self.factors()
        b, c, hh, ww = v.shape
        z = v.permute(1, 0, 2, 3).reshape(c, -1)
        z = p.T @ z
        z = torch.linalg.solve_triangular(lower, z, upper=False, unitriangular=True)
        z = torch.linalg.solve_triangular(upper, z, upper=True)
        return z.reshape(c, b, hh, ww).permute(1, 0, 2, 3)


class DenseSubnet(nn.Module):
    """Five densely connected 3x3 convolutions, LeakyReLU after the first four."""

    def __init__(self, in_channels, out_channels, growth=16, dtype=torch.float64):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels + i * growth, growth, 3, padding=1, dtype=dtype) for i in range(4)
        )
        self.last = nn.Conv2d(in_channels + 4 * growth, out_channels, 3, padding=1, dtype=dtype)
        for conv in self.convs:
            nn.init.xavier_normal_(conv.weight)
            conv.weight.data.mul_(0.1)
            nn.init.zeros_(conv.bias)
        nn.init.zeros_(self.last.weight)
        nn.init.zeros_(self.last.bias)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(F.leaky_relu(conv(torch.cat(feats, 1)), LEAKY_SLOPE))
        return self.last(torch.cat(feats, 1))


class CouplingLayer(nn.Module):
    """Affine coupling with an additive update of the first partition.

    Forward: ``v1 = u1 + r(u2)`` then ``v2 = u2 * exp(s(v1)) + t(v1)``.  The
    scale branch is squashed to ``[-clamp, clamp]`` before exponentiation.
    """

    def __init__(self, channels, growth=16, clamp=2.0, dtype=torch.float64):
        super().__init__()
        if channels < 2:
            raise ValueError("coupling needs at least two channels")
        self.channels = channels
        self.split = channels // 2
        self.clamp = clamp
        d, rest = self.split, channels - self.split
        self.r = DenseSubnet(rest, d, growth, dtype)
        self.s = DenseSubnet(d, rest, growth, dtype)
        self.t = DenseSubnet(d, rest, growth, dtype)

    def log_scale(self, v1):
        return self.clamp * (2.0 * torch.sigmoid(self.s(v1)) - 1.0)

    def forward(self, u):
        if u.shape[1] != self.channels:
            raise ValueError(f"coupling expects {self.channels} channels, got {u.shape[1]}")
        u1, u2 = u[:, : self.split], u[:, self.split :]
        v1 = u1 + self.r(u2)
        ls = self.log_scale(v1)
        v2 = u2 * torch.exp(ls) + self.t(v1)
        return torch.cat([v1, v2], 1), ls.sum(dim=(1, 2, 3))

    def inverse(self, v):
        if v.shape[1] != self.channels:
            raise ValueError(f"coupling expects {self.channels} channels, got {v.shape[1]}")
        v1, v2 = v[:, : self.split], v[:, self.split :]
        u2 = (v2 - self.t(v1)) * torch.exp(-self.log_scale(v1))
        u1 = v1 - self.r(u2)
        return torch.cat([u1, u2], 1)


class InvBlock(nn.Module):
    def __init__(self, channels, growth=16, clamp=2.0, init="identity", generator=None, dtype=torch.float64):
        super().__init__()
        self.conv = InvConv(channels, init, generator, dtype)
        self.coupling = CouplingLayer(channels, growth, clamp, dtype)

    def forward(self, h):
        h, ld1 = self.conv(h)
        h, ld2 = self.coupling(h)
        return h, ld1 + ld2

    def inverse(self, h):
        return self.conv.inverse(self.coupling.inverse(h))


def n_groups(n_physical, n_virtual):
    return math.ceil(n_physical / n_virtual)


def pad_coils(x, n_physical, n_virtual):
    """Append replicated coils (cycling from the first) up to ``N * G`` coils."""
    padded = n_virtual * n_groups(n_physical, n_virtual)
    if x.shape[-3] != n_physical:
        raise ValueError(f"expected {n_physical} coils, got {x.shape[-3]}")
    if padded == n_physical:
        return x
    idx = [i % n_physical for i in range(padded)]
    if isinstance(x, torch.Tensor):
        return x[..., idx, :, :]
    return np.asarray(x)[..., idx, :, :]


def augment_average(y, n_physical, n_virtual):
    """Mean over the ``G`` contiguous groups of ``N`` coils.

    Computed as ``y_0 + sum_g (y_g - y_0) / G`` so identical groups come back
    bit-for-bit.
    """
    g = n_groups(n_physical, n_virtual)
    if y.shape[-3] == n_physical and n_physical != g * n_virtual:
        y = pad_coils(y, n_physical, n_virtual)
    if y.shape[-3] != g * n_virtual:
        raise ValueError(f"expected {g * n_virtual} coils, got {y.shape[-3]}")
    groups = y.reshape(*y.shape[:-3], g, n_virtual, *y.shape[-2:])
    first = groups[..., 0, :, :, :]
    if g == 1:
        return first
    return first + (groups[..., 1:, :, :, :] - first[..., None, :, :, :]).sum(-4) / g


def tile_groups(z, n_groups_):
    """Repeat ``N`` virtual coils ``G`` times along the coil axis."""
    if isinstance(z, torch.Tensor):
        return torch.cat([z] * n_groups_, dim=-3)
    return np.concatenate([z] * n_groups_, axis=-3)


class FlowModel(nn.Module):
    """Stack of :class:`InvBlock` acting on ``2 * N * G`` real channels."""

    def __init__(
        self,
        n_physical,
        n_virtual,
        n_blocks=4,
        growth=16,
        clamp=2.0,
        init="rotation",
        seed=0,
        dtype=torch.float32,
    ):
        super().__init__()
        if not 1 <= n_virtual <= n_physical:
            raise ValueError(f"cannot compress {n_physical} coils into {n_virtual}")
        self.n_physical = n_physical
        self.n_virtual = n_virtual
        self.groups = n_groups(n_physical, n_virtual)
        self.channels = 2 * n_virtual * self.groups
        self.growth = growth
        self.clamp = clamp
        gen = torch.Generator().manual_seed(seed)
        # subnet init draws from the global RNG; fork it so the caller's stream is untouched
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.blocks = nn.ModuleList(
                InvBlock(self.channels, growth, clamp, init, gen, dtype) for _ in range(n_blocks)
            )

    @property
    def dtype(self):
        return next(self.parameters()).dtype if len(self.blocks) else torch.float64

    def _as_tensor(self, x):
        cdtype = torch.complex128 if self.dtype == torch.float64 else torch.complex64
        if isinstance(x, torch.Tensor):
            return x.to(cdtype)
        return torch.as_tensor(np.asarray(x)).to(cdtype)

    def _real_forward(self, h):
        logdet = torch.zeros(h.shape[0], dtype=h.dtype)
        for block in self.blocks:
            h, ld = block(h)
            logdet = logdet + ld
        return h, logdet

    def _real_inverse(self, h):
        for block in reversed(self.blocks):
            h = block.inverse(h)
        return h

    def forward(self, x):
        """Complex ``(B, C, H, W)`` -> (complex ``(B, N*G, H, W)``, logdet per sample)."""
        x = self._as_tensor(x)
        h = split_complex_array(pad_coils(x, self.n_physical, self.n_virtual))
        h, logdet = self._real_forward(h)
        return merge_complex_array(h), logdet

    def inverse(self, y):
        """Complex ``(B, N*G, H, W)`` -> complex ``(B, C, H, W)``."""
        y = self._as_tensor(y)
        if y.shape[-3] != self.n_virtual * self.groups:
            raise ValueError(f"expected {self.n_virtual * self.groups} coils, got {y.shape[-3]}")
        h = self._real_inverse(split_complex_array(y))
        return merge_complex_array(h)[:, : self.n_physical]

    def compress(self, x):
        return augment_average(self(x)[0], self.n_physical, self.n_virtual)

    def recover(self, y):
        y = self._as_tensor(y)
        if y.shape[-3] != self.n_virtual:
            raise ValueError(f"expected {self.n_virtual} virtual coils, got {y.shape[-3]}")
        return self.inverse(tile_groups(y, self.groups))

    @torch.no_grad()
    def randomize_(self, std=0.1, generator=None):
        """Fill every learnable parameter with random values (testing aid).

        Conv weights get std ``std / sqrt(fan_in)`` so subnet outputs stay
        O(std) relative to their inputs; everything else gets ``std``.
        """
        for name, p in self.named_parameters():
            scale = std
            if p.ndim == 4:
                scale = std / math.sqrt(p.shape[1] * p.shape[2] * p.shape[3])
            p.copy_(torch.randn(p.shape, generator=generator, dtype=torch.float64).to(p.dtype) * scale)
        return self

    def hyperparameters(self) -> dict:
        return {
            "n_physical": self.n_physical,
            "n_virtual": self.n_virtual,
            "n_blocks": len(self.blocks),
            "growth": self.growth,
            "clamp": self.clamp,
        }


# --- numpy / ComplexImage front end ----------------------------------------


def _to_batch(x):
    if isinstance(x, ComplexImage):
        return x.data[None], x.domain
    x = np.asarray(x) if not isinstance(x, torch.Tensor) else x
    return (x[None] if x.ndim == 3 else x), None


def _from_batch(out, like_domain, single):
    arr = out.detach().cpu().numpy()
    if single:
        arr = arr[0]
    if like_domain is not None:
        return ComplexImage(arr, like_domain)
    return arr


def _run(fn, x):
    batch, domain = _to_batch(x)
    single = isinstance(x, ComplexImage) or np.ndim(x) == 3
    with torch.no_grad():
        out = fn(batch)
    return _from_batch(out, domain, single)


def model_forward(x, m: FlowModel):
    batch, domain = _to_batch(x)
    single = isinstance(x, ComplexImage) or np.ndim(x) == 3
    with torch.no_grad():
        y, logdet = m(batch)
    ld = logdet.numpy()
    return _from_batch(y, domain, single), (float(ld[0]) if single else ld)


def model_inverse(y, m: FlowModel):
    return _run(m.inverse, y)


def compress(x, m: FlowModel):
    return _run(m.compress, x)


def recover(y, m: FlowModel):
    return _run(m.recover, y)


# --- checkpoints ------------------------------------------------------------


def _manifest(model: FlowModel, extra: dict | None) -> dict:
    params = [[name, list(p.shape)] for name, p in model.named_parameters()]
    perms = [b.conv.perm.argmax(0).tolist() for b in model.blocks]
    signs = [[int(v) for v in b.conv.sign_s.tolist()] for b in model.blocks]
    doc = {"format": "VICC0001", "channels": model.channels, **model.hyperparameters()}
    doc.update({"perms": perms, "signs": signs, "params": params, "extra": extra or {}})
    return doc


def save_checkpoint(path, model: FlowModel, extra: dict | None = None) -> None:
    """Magic, u32 manifest length, JSON manifest, then float32 parameters in manifest order."""
    header = json.dumps(_manifest(model, extra), sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, p in model.named_parameters():
            f.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def read_checkpoint_manifest(path) -> dict:
    from .datagen import BadMagicError, TruncatedFileError

    raw = open(path, "rb").read()
    if raw[:8] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a VICC0001 checkpoint")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    (n,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + n:
        raise TruncatedFileError(f"{path}: manifest truncated")
    return json.loads(raw[12 : 12 + n]), raw[12 + n :]


def load_checkpoint(path, dtype=torch.float32) -> FlowModel:
    from .datagen import TruncatedFileError

    doc, payload = read_checkpoint_manifest(path)
    model = FlowModel(
        doc["n_physical"], doc["n_virtual"], doc["n_blocks"], doc["growth"], doc["clamp"],
        init="identity", dtype=dtype,
    )
    expected = sum(int(np.prod(shape)) for _, shape in doc["params"]) * 4
    if len(payload) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} parameter bytes, found {len(payload)}")
    with torch.no_grad():
        for block, perm, signs in zip(model.blocks, doc["perms"], doc["signs"]):
            c = block.conv.channels
            p = torch.zeros(c, c, dtype=dtype)
            p[perm, range(c)] = 1.0
            block.conv.perm.copy_(p)
            block.conv.sign_s.copy_(torch.tensor(signs, dtype=dtype))
        named = dict(model.named_parameters())
        offset = 0
        for name, shape in doc["params"]:
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
            named[name].copy_(torch.from_numpy(arr.astype(np.float32)))
            offset += 4 * count
    model.checkpoint_extra = doc.get("extra", {})
    return model
