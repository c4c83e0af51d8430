import json

import numpy as np
import pytest
import torch

from invcc.cli import main
from invcc.datagen import load_mcs, save_mcs
from invcc.flow import FlowModel, load_checkpoint, save_checkpoint
from invcc.ndcore import ComplexImage, Domain, fft2c


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def phantom(tmp_path, capsys):
    p = tmp_path / "x.mcs"
    assert run(capsys, "phantom", "--size", "16x16", "--coils", 6, "--seed", 7, "--out", p)[0] == 0
    return p


def test_phantom_is_deterministic_and_sized(tmp_path, capsys, phantom):
    q = tmp_path / "y.mcs"
    run(capsys, "phantom", "--size", "16x16", "--coils", 6, "--seed", 7, "--out", q)
    assert phantom.read_bytes() == q.read_bytes()
    assert phantom.stat().st_size == 16 + 8 * 6 * 16 * 16
    meta = json.loads((tmp_path / "x.meta.json").read_text())
    assert meta["domain"] == "kspace" and meta["seed"] == 7


def test_phantom_rejects_single_coil(tmp_path, capsys):
    assert run(capsys, "phantom", "--coils", 1, "--out", tmp_path / "z.mcs")[0] == 2


def test_phantom_directory_of_slices(tmp_path, capsys):
    d = tmp_path / "slices"
    assert run(capsys, "phantom", "--size", "8x8", "--coils", 4, "--slices", 3, "--out", d)[0] == 0
    assert sorted(p.name for p in d.glob("*.mcs")) == ["slice_000.mcs", "slice_001.mcs", "slice_002.mcs"]


def test_usage_errors(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "phantom", "--size", "axb", "--out", "x")[0] == 2
    assert run(capsys, "phantom", "--bogus", "1", "--out", "x")[0] == 2


def test_baseline_full_rank_has_zero_error(tmp_path, capsys, phantom):
    code, out, _ = run(capsys, "baseline", "--method", "scc", "--in", phantom, "--virtual", 6,
                       "--out", tmp_path / "y.mcs")
    assert code == 0
    err = float(next(line for line in out.splitlines() if line.startswith("relative_error")).split()[1])
    assert err <= 1e-12


def test_baseline_gcc_not_worse_than_scc(tmp_path, capsys, phantom):
    code, out, _ = run(capsys, "baseline", "--method", "gcc", "--in", phantom, "--virtual", 3,
                       "--out", tmp_path / "y.mcs", "--matrix-out", tmp_path / "a.ccm", "--compare")
    assert code == 0
    assert "gcc<=scc True" in out
    assert load_mcs(tmp_path / "y.mcs").coils == 3
    code, out, _ = run(capsys, "info", tmp_path / "a.ccm")
    assert "mode=gcc n_virtual=3 n_physical=6 locations=16" in out


def test_baseline_errors(tmp_path, capsys, phantom):
    assert run(capsys, "baseline", "--method", "scc", "--in", phantom, "--virtual", 9,
               "--out", tmp_path / "y.mcs")[0] == 2
    assert run(capsys, "baseline", "--method", "scc", "--in", tmp_path / "missing.mcs", "--virtual", 2,
               "--out", tmp_path / "y.mcs")[0] == 3
    (tmp_path / "junk.mcs").write_bytes(b"JUNKJUNKJUNKJUNK")
    assert run(capsys, "baseline", "--method", "scc", "--in", tmp_path / "junk.mcs", "--virtual", 2,
               "--out", tmp_path / "y.mcs")[0] == 3


def test_compress_recover_identity_checkpoint_gives_inf(tmp_path, capsys):
    base = np.random.default_rng(0).standard_normal((2, 8, 8)) + 0j
    x = np.concatenate([base, base])
    save_mcs(tmp_path / "x.mcs", ComplexImage(x, Domain.IMAGE))
    m = FlowModel(4, 2, 2, growth=4, init="identity")
    save_checkpoint(tmp_path / "m.ckpt", m, {"variant": "image"})
    assert run(capsys, "compress", "--model", tmp_path / "m.ckpt", "--in", tmp_path / "x.mcs",
               "--out", tmp_path / "y.mcs")[0] == 0
    code, out, _ = run(capsys, "recover", "--model", tmp_path / "m.ckpt", "--in", tmp_path / "y.mcs",
                       "--out", tmp_path / "r.mcs", "--ref", tmp_path / "x.mcs")
    assert code == 0
    assert "coils 2 -> 4" in out and "psnr_db inf" in out


def test_compress_coil_mismatch(tmp_path, capsys, phantom):
    save_checkpoint(tmp_path / "m.ckpt", FlowModel(4, 2, 1, growth=4))
    assert run(capsys, "compress", "--model", tmp_path / "m.ckpt", "--in", phantom,
               "--out", tmp_path / "y.mcs")[0] == 3


def _config(tmp_path, **kw):
    doc = {"n_blocks": 2, "growth": 4, "lr": 1e-3, "epochs": 1, **kw}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def test_train_zero_epochs_writes_initial_model(tmp_path, capsys):
    d = tmp_path / "data"
    run(capsys, "phantom", "--size", "8x8", "--coils", 4, "--slices", 2, "--out", d)
    cfg = _config(tmp_path, epochs=0)
    code, _, _ = run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "m.ckpt",
                     "--variant", "k", "--virtual", 2)
    assert code == 0
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    init = FlowModel(4, 2, 2, growth=4, seed=0)
    for p, q in zip(loaded.parameters(), init.parameters()):
        assert torch.equal(p, q)
    assert (tmp_path / "m.ckpt.trace.csv").read_text().startswith("step,epoch,lr,L_f,L_r,total,group_consistency")


def test_train_is_reproducible_and_accepts_mask(tmp_path, capsys):
    d = tmp_path / "data"
    run(capsys, "phantom", "--size", "8x8", "--coils", 4, "--slices", 2, "--out", d)
    cfg = _config(tmp_path, epochs=2)
    traces = []
    for i in range(2):
        code, out, err = run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / f"m{i}.ckpt",
                             "--variant", "i", "--virtual", 2, "--mask", "2,4")
        assert code == 0, err
        traces.append((tmp_path / f"m{i}.ckpt.trace.csv").read_bytes())
    assert traces[0] == traces[1]
    assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()
    code, out, _ = run(capsys, "info", tmp_path / "m0.ckpt")
    assert "variant=image" in out


def test_train_divergence_exit_code(tmp_path, capsys):
    d = tmp_path / "data"
    run(capsys, "phantom", "--size", "8x8", "--coils", 4, "--slices", 1, "--out", d)
    cfg = _config(tmp_path, divergence_threshold=1e-12)
    assert run(capsys, "train", "--config", cfg, "--data", d, "--out", tmp_path / "m.ckpt",
               "--virtual", 2)[0] == 4
    bad = _config(tmp_path, not_a_field=1)
    assert run(capsys, "train", "--config", bad, "--data", d, "--out", tmp_path / "m.ckpt",
               "--virtual", 2)[0] == 2


def test_eval_csv_and_dumps(tmp_path, capsys, phantom):
    run(capsys, "baseline", "--method", "scc", "--in", phantom, "--virtual", 3, "--out", tmp_path / "s.mcs")
    code, out, _ = run(capsys, "eval", "--ref", phantom, "--cand", f"{phantom},{tmp_path / 's.mcs'}",
                       "--labels", "ref,scc", "--out", tmp_path / "r.csv", "--dump-dir", tmp_path / "dump")
    assert code == 0
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "method,n_virtual,psnr_db,ssim"
    assert lines[1] == "ref,6,inf,1.000000"
    assert lines[2].startswith("scc,3,")
    assert out == (tmp_path / "r.csv").read_text()

    raw = (tmp_path / "dump" / "scc_diff.pgm").read_bytes()
    header = b"P5\n16 16\n255\n"
    assert raw.startswith(header)
    pix = np.frombuffer(raw[len(header):], dtype=np.uint8).reshape(16, 16)
    # oracle: 3x absolute sos difference on the reference scale, 8-bit quantized
    from invcc.ndcore import ifft2c, sos

    r = sos(ifft2c(load_mcs(phantom)))
    c = sos(ifft2c(load_mcs(tmp_path / "s.mcs")))
    expect = np.round(np.clip(3 * np.abs(c - r) / r.max(), 0, 1) * 255).astype(np.uint8)
    assert pix.max() == expect.max()
    assert np.array_equal(pix, expect)


def test_eval_label_mismatch(tmp_path, capsys, phantom):
    assert run(capsys, "eval", "--ref", phantom, "--cand", phantom, "--labels", "a,b")[0] == 2


def test_info_on_mcs_and_unknown(tmp_path, capsys, phantom):
    code, out, _ = run(capsys, "info", phantom)
    assert out.strip() == "mcs coils=6 height=16 width=16 domain=kspace"
    (tmp_path / "u.bin").write_bytes(b"????????")
    assert run(capsys, "info", tmp_path / "u.bin")[0] == 3


def test_image_domain_input_is_handled(tmp_path, capsys):
    x = ComplexImage(np.random.default_rng(1).standard_normal((4, 8, 8)) + 0j, Domain.IMAGE)
    save_mcs(tmp_path / "x.mcs", x)
    save_mcs(tmp_path / "xk.mcs", fft2c(x))
    m = FlowModel(4, 2, 1, growth=4, init="identity")
    save_checkpoint(tmp_path / "m.ckpt", m, {"variant": "kspace"})
    run(capsys, "compress", "--model", tmp_path / "m.ckpt", "--in", tmp_path / "x.mcs", "--out", tmp_path / "y.mcs")
    y = load_mcs(tmp_path / "y.mcs")
    assert y.domain is Domain.IMAGE and y.coils == 2
