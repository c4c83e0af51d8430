"""Command line interface: ``invcc <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 file or format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import classic
from .datagen import (
    McsFormatError,
    apply_mask,
    load_mcs,
    make_dataset,
    make_mask,
    save_mcs,
)
from .flow import (
    CKPT_MAGIC,
    SingularInvConvError,
    FlowModel,
    load_checkpoint,
    read_checkpoint_manifest,
    save_checkpoint,
)
from .metrics import evaluate, psnr
from .ndcore import ComplexImage, Domain, fft2c, ifft2c, sos
from .train import NonFiniteError, TrainConfig, TrainingDiverged, Variant, make_pairs, train, write_trace

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("invcc")


class UsageError(Exception):
    pass


class CoilMismatchError(ValueError):
    pass


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _mask_spec(text):
    try:
        r, acs = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected R,acs, got {text!r}") from None
    return r, acs


def _to_domain(img: ComplexImage, domain: Domain) -> ComplexImage:
    if img.domain is domain:
        return img
    return fft2c(img) if domain is Domain.KSPACE else ifft2c(img)


def _image(img: ComplexImage) -> np.ndarray:
    return sos(_to_domain(img, Domain.IMAGE))


# --- commands -----------------------------------------------------------------


def cmd_phantom(args):
    h, w = args.size
    if args.coils < 2:
        raise UsageError("a phantom needs at least 2 coils")
    domain = Domain(args.domain)
    data = make_dataset(args.slices, h, w, args.coils, seed=args.seed, noise=args.noise,
                        domain=domain, slice_seed=args.slice_seed)
    meta = {"seed": args.seed, "coils": args.coils, "noise": args.noise, "slice_seed": args.slice_seed}
    out = Path(args.out)
    if args.slices == 1:
        paths = [out]
    else:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"slice_{i:03d}.mcs" for i in range(args.slices)]
    for i, (p, x) in enumerate(zip(paths, data)):
        save_mcs(p, ComplexImage(x, domain), {**meta, "slice": i})
        print(f"wrote {p} ({args.coils} coils, {h}x{w}, {domain.value})")


def cmd_baseline(args):
    x = _to_domain(load_mcs(args.input), Domain.KSPACE)
    cols = None
    if args.calib == "acs":
        cols = make_mask(x.height, x.width, 1, args.acs_lines).acs_columns
    fit = classic.scc_fit if args.method == "scc" else classic.gcc_fit
    a = fit(x, args.virtual, calib_columns=cols)
    y = classic.compress_apply(x, a)
    save_mcs(args.out, y, {"method": args.method, "n_virtual": args.virtual, "source": str(args.input)})
    if args.matrix_out:
        classic.save_ccm(args.matrix_out, a)
    err = classic.compression_error(x, a)
    energy = float(np.sum(np.abs(x.data) ** 2))
    print(f"method {args.method}")
    print(f"coils {x.coils} -> {args.virtual}")
    print(f"compression_error {err:.6e}")
    print(f"relative_error {err / energy:.6e}")
    if args.compare:
        other = classic.gcc_fit if args.method == "scc" else classic.scc_fit
        e_scc, e_gcc = (err, classic.compression_error(x, other(x, args.virtual, calib_columns=cols)))
        if args.method == "gcc":
            e_scc, e_gcc = e_gcc, e_scc
        print(f"scc_error {e_scc:.6e} gcc_error {e_gcc:.6e} gcc<=scc {e_gcc <= e_scc}")


def _load_training_data(data_dir, variant: Variant, mask):
    files = sorted(Path(data_dir).glob("*.mcs")) if Path(data_dir).is_dir() else [Path(data_dir)]
    if not files:
        raise FileNotFoundError(f"no .mcs files in {data_dir}")
    slices = []
    for f in files:
        x = _to_domain(load_mcs(f), Domain.KSPACE)
        if mask is not None:
            x = apply_mask(x, make_mask(x.height, x.width, *mask))
        if variant is Variant.IMAGE:
            x = ifft2c(x)
        slices.append(x.data)
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise McsFormatError(f"training files disagree in shape: {sorted(shapes)}")
    return np.stack(slices), files


def cmd_train(args):
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.variant:
        cfg.variant = Variant.parse(args.variant)
    if args.seed is not None:
        cfg.seed = args.seed
    xs, files = _load_training_data(args.data, cfg.variant, args.mask)
    if not 1 <= args.virtual <= xs.shape[1]:
        raise UsageError(f"cannot compress {xs.shape[1]} coils into {args.virtual}")
    model = FlowModel(xs.shape[1], args.virtual, cfg.n_blocks, cfg.growth, cfg.clamp, seed=cfg.seed)
    pairs = make_pairs(xs, args.virtual, cfg.variant, cfg.target)
    _, trace = train(model, pairs, cfg, consistency_every=args.consistency_every)
    extra = {"variant": cfg.variant.value, "config": cfg.to_dict(), "slices": len(files),
             "mask": list(args.mask) if args.mask else None}
    save_checkpoint(args.out, model, extra)
    trace_path = args.trace or str(args.out) + ".trace.csv"
    write_trace(trace_path, trace)
    print(f"trained {len(trace)} steps on {len(files)} slices ({cfg.variant.value})")
    if trace:
        print(f"first_loss {trace[0]['total']:.6e} final_loss {trace[-1]['total']:.6e}")
    print(f"wrote {args.out} and {trace_path}")


def _load_model(path):
    model = load_checkpoint(path, dtype=torch.float64)
    variant = Variant(model.checkpoint_extra.get("variant", "kspace"))
    return model, variant


def _apply_model(model, variant, img: ComplexImage, method, expect):
    if img.coils != expect:
        raise CoilMismatchError(f"input has {img.coils} coils, checkpoint expects {expect}")
    work = _to_domain(img, Domain(variant.value))
    with torch.no_grad():
        out = getattr(model, method)(model._as_tensor(work.data[None]))[0].numpy()
    return _to_domain(ComplexImage(out, work.domain), img.domain)


def cmd_compress(args):
    model, variant = _load_model(args.model)
    x = load_mcs(args.input)
    y = _apply_model(model, variant, x, "compress", model.n_physical)
    save_mcs(args.out, y, {"model": str(args.model), "n_virtual": y.coils})
    print(f"coils {x.coils} -> {y.coils}")


def cmd_recover(args):
    model, variant = _load_model(args.model)
    y = load_mcs(args.input)
    x = _apply_model(model, variant, y, "recover", model.n_virtual)
    save_mcs(args.out, x, {"model": str(args.model), "n_physical": x.coils})
    print(f"coils {y.coils} -> {x.coils}")
    if args.ref:
        ref = load_mcs(args.ref)
        r = _image(ref)
        value = psnr(_image(x) / r.max(), r / r.max())
        print(f"psnr_db {value:.6f}" if np.isfinite(value) else "psnr_db inf")


def write_pgm(path, img, scale=None):
    """8-bit binary PGM; ``img`` is divided by ``scale`` (its own max by default) and clipped."""
    img = np.asarray(img, dtype=np.float64)
    scale = float(np.max(img)) if scale is None else scale
    norm = img / scale if scale > 0 else np.zeros_like(img)
    q = np.round(np.clip(norm, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode())
        f.write(q.tobytes())


def cmd_eval(args):
    cands = [c for c in args.cand.split(",") if c]
    labels = args.labels.split(",") if args.labels else [Path(c).stem for c in cands]
    if len(labels) != len(cands):
        raise UsageError(f"{len(cands)} candidates but {len(labels)} labels")
    ref = load_mcs(args.ref)
    imgs = {label: load_mcs(c) for label, c in zip(labels, cands)}
    report = evaluate(ref, imgs, windowed_ssim=args.windowed_ssim)
    if args.out:
        report.write_csv(args.out)
    sys.stdout.write(report.to_csv())
    if args.dump_dir:
        d = Path(args.dump_dir)
        d.mkdir(parents=True, exist_ok=True)
        r = _image(ref)
        peak = float(r.max())
        write_pgm(d / "reference.pgm", r)
        for label, img in imgs.items():
            c = _image(img)
            write_pgm(d / f"{label}.pgm", c)
            # absolute difference on the reference scale, magnified three times
            write_pgm(d / f"{label}_diff.pgm", 3.0 * np.abs(c - r) / peak, scale=1.0)


def cmd_info(args):
    path = Path(args.file)
    head = path.read_bytes()[:8]
    if head[:4] == b"MCS1":
        img = load_mcs(path)
        print(f"mcs coils={img.coils} height={img.height} width={img.width} domain={img.domain.value}")
    elif head[:4] == classic.CCM_MAGIC:
        a = classic.load_ccm(path)
        print(f"ccm mode={a.mode.name.lower()} n_virtual={a.n_virtual} n_physical={a.n_physical} "
              f"locations={a.matrices.shape[0]}")
    elif head == CKPT_MAGIC:
        doc, _ = read_checkpoint_manifest(path)
        n_params = sum(int(np.prod(s)) for _, s in doc["params"])
        print(f"checkpoint n_physical={doc['n_physical']} n_virtual={doc['n_virtual']} "
              f"blocks={doc['n_blocks']} growth={doc['growth']} parameters={n_params} "
              f"variant={doc['extra'].get('variant', 'kspace')}")
    else:
        raise McsFormatError(f"{path}: unrecognized file magic {head[:4]!r}")


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invcc", description="Invertible MR coil compression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write synthetic multi-coil phantom slices")
    s.add_argument("--size", type=_size, default=(64, 64))
    s.add_argument("--coils", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--slice-seed", type=int, default=None)
    s.add_argument("--slices", type=int, default=1)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--domain", choices=["kspace", "image"], default="kspace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("baseline", help="SCC or GCC compression")
    s.add_argument("--method", choices=["scc", "gcc"], required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--virtual", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--matrix-out")
    s.add_argument("--calib", choices=["full", "acs"], default="full")
    s.add_argument("--acs-lines", type=int, default=24)
    s.add_argument("--compare", action="store_true", help="also fit the other method and print both errors")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("train", help="train a flow compressor")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="directory of .mcs slices (or one file)")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=["i", "k", "image", "kspace"])
    s.add_argument("--virtual", type=int, required=True)
    s.add_argument("--mask", type=_mask_spec)
    s.add_argument("--seed", type=int)
    s.add_argument("--trace")
    s.add_argument("--consistency-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("compress", help="compress with a trained flow")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("recover", help="recover physical coils with the inverse flow")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ref")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("eval", help="PSNR/SSIM report")
    s.add_argument("--ref", required=True)
    s.add_argument("--cand", required=True, help="comma-separated .mcs files")
    s.add_argument("--labels")
    s.add_argument("--out")
    s.add_argument("--dump-dir")
    s.add_argument("--windowed-ssim", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("info", help="describe an .mcs, .ccm or checkpoint file")
    s.add_argument("file")
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (TrainingDiverged, NonFiniteError, SingularInvConvError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (McsFormatError, CoilMismatchError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (UsageError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
