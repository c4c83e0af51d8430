import itertools
import math

import numpy as np
import pytest
import torch

from invcc.datagen import BadMagicError, TruncatedFileError, make_dataset
from invcc.flow import (
    CouplingLayer,
    FlowModel,
    InvConv,
    SingularInvConvError,
    augment_average,
    compress,
    load_checkpoint,
    model_forward,
    model_inverse,
    n_groups,
    pad_coils,
    read_checkpoint_manifest,
    recover,
    save_checkpoint,
    tile_groups,
)
from invcc.ndcore import ComplexImage, Domain


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def cofactor_det(m):
    n = len(m)
    if n == 1:
        return m[0][0]
    total = 0.0
    for j in range(n):
        minor = [row[:j] + row[j + 1 :] for row in m[1:]]
        total += (-1) ** j * m[0][j] * cofactor_det(minor)
    return total


def random_model(c, n, blocks=2, std=0.1, seed=0, **kw):
    m = FlowModel(c, n, blocks, dtype=torch.float64, seed=seed, **kw)
    return m.randomize_(std, torch.Generator().manual_seed(seed + 1))


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_identity_invconv_is_identity():
    conv = InvConv(6)
    h = torch.randn(2, 6, 3, 4, dtype=torch.float64)
    out, logdet = conv(h)
    assert torch.equal(out, h)
    assert torch.all(logdet == 0)


@pytest.mark.parametrize("case", range(40))
def test_invconv_logdet_matches_cofactor_expansion(case):
    g = torch.Generator().manual_seed(case)
    c = 1 + case % 4
    conv = InvConv(c, "rotation" if case % 2 else "identity", g)
    with torch.no_grad():
        conv.lower.normal_(generator=g)
        conv.upper.normal_(generator=g)
        conv.log_s.normal_(generator=g)
    h, w = 3, 5
    _, logdet = conv(torch.zeros(1, c, h, w, dtype=torch.float64))
    det = cofactor_det(conv.weight().detach().tolist())
    assert logdet.item() == pytest.approx(h * w * math.log(abs(det)), rel=1e-9, abs=1e-12)


def test_invconv_inverse_matches_dense_inverse():
    g = torch.Generator().manual_seed(3)
    conv = InvConv(5, "rotation", g)
    with torch.no_grad():
        conv.lower.normal_(std=0.3, generator=g)
        conv.log_s.normal_(std=0.3, generator=g)
    v = torch.randn(2, 5, 4, 4, dtype=torch.float64, generator=g)
    dense = torch.einsum("ij,bjhw->bihw", torch.linalg.inv(conv.weight()), v)
    torch.testing.assert_close(conv.inverse(v), dense, atol=1e-12, rtol=1e-12)


def test_rotation_init_keeps_permutation_and_signs_fixed():
    conv = InvConv(8, "rotation", torch.Generator().manual_seed(0))
    w = conv.weight().detach()
    torch.testing.assert_close(w @ w.T, torch.eye(8, dtype=torch.float64), atol=1e-12, rtol=0)
    assert conv.perm.requires_grad is False
    assert set(conv.sign_s.tolist()) <= {-1.0, 1.0}
    names = {n for n, _ in conv.named_parameters()}
    assert names == {"lower", "upper", "log_s"}


def test_singular_invconv_rejected_on_inverse():
    conv = InvConv(2)
    with torch.no_grad():
        conv.log_s[0] = -40.0
    with pytest.raises(SingularInvConvError):
        conv.inverse(torch.zeros(1, 2, 2, 2, dtype=torch.float64))


class _Const(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


def test_coupling_closed_form_with_constant_subnets():
    layer = CouplingLayer(4, growth=2, clamp=2.0)
    layer.r, layer.s, layer.t = _Const(0.5), _Const(1.0), _Const(-0.25)
    u = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    v, ls = layer(u)
    k = 2.0 * (2.0 / (1.0 + math.exp(-1.0)) - 1.0)
    torch.testing.assert_close(v[:, :2], u[:, :2] + 0.5)
    torch.testing.assert_close(v[:, 2:], u[:, 2:] * math.exp(k) - 0.25)
    assert ls.item() == pytest.approx(k * 2 * 9, rel=1e-12)
    torch.testing.assert_close(layer.inverse(v), u, atol=1e-13, rtol=0)


def test_scale_stays_within_clamp():
    layer = CouplingLayer(4, growth=2, clamp=1.5)
    layer.s = _Const(1e4)
    ls = layer.log_scale(torch.zeros(1, 2, 2, 2, dtype=torch.float64))
    assert torch.all(ls.abs() <= 1.5)


def test_fresh_model_subnets_are_zero_maps():
    m = FlowModel(4, 2, 2, dtype=torch.float64, init="identity")
    x = crandn(np.random.default_rng(0), 1, 4, 6, 6)
    y, logdet = model_forward(x, m)
    np.testing.assert_allclose(y, x, atol=0)
    assert np.all(logdet == 0)


@pytest.mark.parametrize(
    "c,n,h,w,blocks",
    [(2, 1, 8, 8, 1), (4, 2, 16, 16, 2), (6, 3, 17, 13, 4), (6, 4, 8, 8, 2), (12, 5, 9, 7, 2), (8, 3, 5, 6, 1)],
)
def test_roundtrip_random_models(c, n, h, w, blocks):
    m = random_model(c, n, blocks, std=0.2, seed=c * 10 + n)
    x = crandn(np.random.default_rng(c), 3, c, h, w)
    y, _ = model_forward(x, m)
    assert y.shape == (3, n * n_groups(c, n), h, w)
    assert rel(model_inverse(y, m), x) <= 1e-9


def test_roundtrip_accepts_complex_image():
    m = random_model(4, 2)
    x = ComplexImage(crandn(np.random.default_rng(1), 4, 8, 8), Domain.KSPACE)
    y, logdet = model_forward(x, m)
    assert isinstance(y, ComplexImage) and y.domain is Domain.KSPACE and isinstance(logdet, float)
    back = model_inverse(y, m)
    assert rel(back.data, x.data) <= 1e-9


def test_logdet_adds_over_blocks():
    m = random_model(4, 2, blocks=3)
    x = torch.as_tensor(crandn(np.random.default_rng(2), 2, 4, 5, 5))
    _, total = m(x)
    from invcc.ndcore import split_complex_array

    h = split_complex_array(x)
    acc = torch.zeros(2, dtype=torch.float64)
    for block in m.blocks:
        h, a = block.conv(h)
        h, b = block.coupling(h)
        acc = acc + a + b
    torch.testing.assert_close(total, acc, atol=1e-10, rtol=1e-12)


def test_pad_coils_cycles_from_first():
    x = np.arange(6)[:, None, None] * np.ones((6, 2, 2))
    p = pad_coils(x, 6, 4)
    assert p[:, 0, 0].tolist() == [0, 1, 2, 3, 4, 5, 0, 1]


def test_augment_average_matches_index_oracle():
    rng = np.random.default_rng(3)
    y = crandn(rng, 12, 3, 3)
    out = augment_average(y, 12, 4)
    for k in range(4):
        expect = (y[k] + y[4 + k] + y[8 + k]) / 3
        np.testing.assert_allclose(out[k], expect, atol=1e-14)


def test_augment_average_exact_on_identical_groups():
    rng = np.random.default_rng(4)
    z = crandn(rng, 3, 5, 5) * 1e3
    assert np.array_equal(augment_average(tile_groups(z, 4), 12, 3), z)


def test_tile_then_average_is_idempotent():
    rng = np.random.default_rng(5)
    z = crandn(rng, 2, 4, 4)
    once = augment_average(tile_groups(z, 3), 6, 2)
    twice = augment_average(tile_groups(once, 3), 6, 2)
    assert np.array_equal(once, twice)


def test_recover_after_compress_exact_when_groups_agree():
    # with identity blocks the padded replicas make every group equal
    m = FlowModel(8, 4, 2, dtype=torch.float64, init="identity")
    base = crandn(np.random.default_rng(6), 4, 8, 8)
    x = np.concatenate([base, base])
    assert rel(recover(compress(x, m), m), x) <= 1e-12


def test_shape_errors():
    m = FlowModel(4, 2, 1, dtype=torch.float64)
    with pytest.raises(ValueError):
        model_forward(np.zeros((3, 4, 4), complex), m)
    with pytest.raises(ValueError):
        recover(np.zeros((3, 4, 4), complex), m)
    with pytest.raises(ValueError):
        FlowModel(2, 3)


def test_construction_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = FlowModel(4, 2, 2, seed=7)
    after = torch.rand(1)
    assert torch.equal(before, after)
    b = FlowModel(4, 2, 2, seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    m = FlowModel(6, 4, 2, growth=4, seed=3).randomize_(0.1, torch.Generator().manual_seed(0))
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, m, {"note": "x"})
    loaded = load_checkpoint(p)
    assert loaded.checkpoint_extra == {"note": "x"}
    q = tmp_path / "m2.ckpt"
    save_checkpoint(q, loaded, {"note": "x"})
    assert p.read_bytes() == q.read_bytes()
    x = crandn(np.random.default_rng(0), 6, 8, 8)
    np.testing.assert_allclose(model_forward(x, loaded)[0], model_forward(x, m)[0], rtol=1e-5, atol=1e-5)


def test_checkpoint_manifest_and_errors(tmp_path):
    m = FlowModel(4, 2, 1, growth=4)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, m)
    doc, payload = read_checkpoint_manifest(p)
    assert doc["n_physical"] == 4 and doc["n_virtual"] == 2 and doc["channels"] == 8
    assert len(payload) == 4 * sum(p.numel() for p in m.parameters())
    raw = p.read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"X" * 20)
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_all_group_sizes_invert():
    for c, n in itertools.product([2, 3, 5], [1, 2]):
        if n > c:
            continue
        m = random_model(c, n, 1, seed=c + n)
        x = crandn(np.random.default_rng(c * n), 1, c, 6, 6)
        assert rel(model_inverse(model_forward(x, m)[0], m), x) <= 1e-9


def test_float32_model_roundtrip():
    m = FlowModel(8, 4, 2, seed=0)
    x = make_dataset(1, 16, 16, 8, seed=0)[0]
    y, _ = model_forward(x, m)
    assert rel(model_inverse(y, m), x) <= 1e-5
