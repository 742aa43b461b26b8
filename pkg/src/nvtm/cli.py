"""Command-line surface: one subcommand per pipeline stage.

Every run is a single job; ``--threads`` bounds the worker pool used by
frame-parallel decoding and ``--deterministic`` pins fixed-order
reductions (the numpy implementation already reduces in a fixed order,
so this flag is a documented guarantee rather than a behavior switch).
Failures exit nonzero with a one-line diagnostic: 2 config, 3 io or
format, 4 numeric, 5 dimension.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checks, codec, config as cfgmod, evaluate, videoio
from . import flow as flowmod
from .alignment import GopPartition, guidance_pairs
from .errors import ConfigError, NvtmError
from .trainer import train

_SYNTH_KINDS = ("translate", "rotate", "parallax")


def _parse_dims(s):
    parts = [int(v) for v in s.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected T,H,W dimensions, got {s!r}")
    return tuple(parts)


def _parse_vel(s):
    parts = [float(v) for v in s.split(",")]
    if len(parts) != 2:
        raise ConfigError(f"expected VX,VY velocity, got {s!r}")
    return tuple(parts)


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_input(args):
    """Video plus an exact-flow provider when the input is synthetic."""
    if getattr(args, "frames", None):
        video = videoio.load_video(args.frames, limit=args.limit)
        return video, None
    spec = flowmod.SyntheticSpec(
        kind=args.synthetic, frames=args.dims[0], height=args.dims[1],
        width=args.dims[2], velocity=args.velocity,
        omega_deg=args.omega_deg, bg_velocity=args.bg_velocity,
        texture_seed=args.texture_seed)
    video, flow_fn = flowmod.gen_synthetic(spec)
    return video.astype(np.float32), flow_fn


def _guidance_for(conf, video, flow_fn, mcfg):
    """Resolve the guidance source for the auxiliary phase."""
    choice = conf["flows"]
    pairs = guidance_pairs(mcfg.partition(), mcfg.neighbors)
    if choice == "none":
        return None
    if choice == "exact":
        if flow_fn is None:
            raise ConfigError("flows = exact requires a synthetic input")
        return flowmod.synthetic_guidance(flow_fn, pairs)
    if choice == "auto":
        if flow_fn is not None:
            return flowmod.synthetic_guidance(flow_fn, pairs)
        return flowmod.compute_guidance(video, pairs,
                                        alpha=conf["flow_alpha"],
                                        iters=conf["flow_iters"])
    return flowmod.load_guidance(choice, video.shape[1], video.shape[2])


def _resolve_conf(args):
    return cfgmod.resolve(preset=args.preset, file=args.config,
                          overrides=_overrides(args.set))


def _train_from_args(args):
    video, flow_fn = _load_input(args)
    conf = _resolve_conf(args)
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.deterministic:
        conf["deterministic"] = True
    t, h, w = video.shape[:3]
    mcfg = cfgmod.model_config(conf, t, h, w)
    tcfg = cfgmod.train_config(conf)
    guidance = _guidance_for(conf, video, flow_fn, mcfg)
    if guidance is None and tcfg.aux_fraction > 0:
        tcfg = cfgmod.train_config({**conf, "aux_fraction": 0.0})
    return video, conf, mcfg, tcfg, guidance


def cmd_stats(args):
    names, stats = [], []
    for d in args.dirs:
        video = videoio.load_video(d, limit=args.limit)
        t, h, w = video.shape[:3]
        si = videoio.compute_si(video)
        ti = videoio.compute_ti(video) if t >= 2 else 0.0
        part = GopPartition(args.gop, t)
        flows = []
        for f in range(t):
            kf = int(part.keyframe_of(part.gop_of(f)))
            if f == kf:
                continue
            fl = flowmod.estimate_flow(video[f], video[kf],
                                       alpha=args.flow_alpha,
                                       iters=args.flow_iters)
            flows.append(fl)
        me = videoio.compute_me(video, flows) if flows else 0.0
        names.append(Path(d).name)
        stats.append(videoio.SequenceStats(si, ti, me))
        print(f"{names[-1]} si={si:.4f} ti={ti:.4f} me={me:.4f}")
    if args.out:
        videoio.write_stats_report(args.out, names, stats)
    kept = videoio.select_dynamic(stats, args.si_min, args.ti_min)
    print("selected (by motion, descending):",
          " ".join(names[i] for i in kept) if kept else "(none)")
    return 0


def cmd_encode(args):
    video, conf, mcfg, tcfg, guidance = _train_from_args(args)
    model, report = train(video, guidance, mcfg, tcfg)
    size = codec.save_model(model, args.out, quantize=args.quantize)
    t, h, w = video.shape[:3]
    print(f"model: {args.out} ({size} bytes, "
          f"{codec.bpp(size, t, h, w):.4f} bpp)")
    if report.final_psnr is not None:
        print(f"reconstruction psnr: {report.final_psnr:.2f} dB")
    if args.report:
        report.save_csv(args.report)
    if args.dump_frames:
        videoio.save_video(video, args.dump_frames, fmt=args.fmt)
    return 0


def cmd_decode(args):
    model = codec.load_model(args.model)
    shape = args.shape or (model.cfg.frames, model.cfg.height,
                           model.cfg.width)
    video = evaluate.decode(model, shape, threads=args.threads)
    videoio.save_video(video, args.out, fmt=args.fmt)
    print(f"decoded {shape[0]}x{shape[1]}x{shape[2]} frames into {args.out}")
    return 0


def cmd_eval(args):
    model = codec.load_model(args.model)
    ref = videoio.load_video(args.frames, limit=args.limit)
    recon = evaluate.decode(model, ref.shape[:3], threads=args.threads)
    value = evaluate.psnr(recon, ref)
    print(f"psnr: {value:.2f} dB")
    return 0


def _eval_against(args, shape_fn, label):
    model = codec.load_model(args.model)
    shape = shape_fn(model)
    video = evaluate.decode(model, shape, threads=args.threads)
    if args.out:
        videoio.save_video(video, args.out, fmt=args.fmt)
    print(f"{label}: decoded {shape[0]}x{shape[1]}x{shape[2]}")
    if args.reference:
        ref = videoio.load_video(args.reference)
        if ref.shape[:3] != shape:
            raise ConfigError(
                f"reference is {ref.shape[:3]}, lattice is {shape}")
        print(f"{label} psnr: {evaluate.psnr(video, ref):.2f} dB")
    return 0


def cmd_superres(args):
    return _eval_against(args, evaluate.sr_shape, "super resolution")


def cmd_interp(args):
    return _eval_against(args, evaluate.fi_shape, "frame interpolation")


def cmd_inpaint(args):
    video, conf, mcfg, tcfg, guidance = _train_from_args(args)
    t, h, w = video.shape[:3]
    spec = evaluate.MaskSpec(count=args.mask_count, side=args.mask_side,
                             seed=args.mask_seed)
    masks = evaluate.gen_masks(spec, t, h, w)
    model, report = train(video, guidance, mcfg, tcfg, masks=masks)
    if args.out:
        codec.save_model(model, args.out)
    recon = evaluate.decode(model, (t, h, w))
    ours = evaluate.region_psnr(recon, video, masks)
    base = evaluate.region_psnr(evaluate.copy_prev_frame(video), video, masks)
    print(f"masked-region psnr: {ours:.2f} dB "
          f"(copy-previous-frame baseline {base:.2f} dB)")
    print(f"full-frame psnr: {evaluate.psnr(recon, video):.2f} dB")
    return 0


def cmd_export(args):
    model = codec.load_model(args.model)
    info = codec.export_grid_video(model, args.out)
    total = codec.tree_bytes(args.out)
    t, h, w = model.cfg.frames, model.cfg.height, model.cfg.width
    print(f"export: {len(info['dirs'])} plane directories, "
          f"{info['model_bytes']} model bytes, "
          f"{info['image_bytes']} image bytes")
    print(f"total {total} bytes = {codec.bpp(total, t, h, w):.4f} bpp")
    if args.check:
        back = codec.import_grid_video(args.out)
        a = evaluate.decode(codec.quantized_copy(model))
        b = evaluate.decode(back)
        print(f"import check: max abs decode difference "
              f"{float(np.max(np.abs(a - b))):.3g}")
    return 0


def cmd_gradcheck(args):
    results = checks.run_suite(
        instances=args.instances, seed=args.seed,
        progress=lambda r: print(
            f"{r['component']:20s} max_rel_err={r['max_rel_err']:.3e} "
            f"{'pass' if r['passed'] else 'FAIL'} ({r['seconds']:.1f}s)"))
    if not checks.suite_passed(results):
        print("gradient suite FAILED")
        return 1
    print("gradient suite passed")
    return 0


def cmd_ablate(args):
    from .flow import SyntheticSpec, gen_synthetic, synthetic_guidance

    spec = SyntheticSpec(kind="translate", frames=args.dims[0],
                         height=args.dims[1], width=args.dims[2],
                         velocity=args.velocity,
                         texture_seed=args.texture_seed)
    video, flow_fn = gen_synthetic(spec)
    video = video.astype(np.float32)
    base = _overrides(args.set)

    def run(label, extra):
        conf = cfgmod.resolve(preset=args.preset,
                              overrides={**base, **extra})
        mcfg = cfgmod.model_config(conf, *video.shape[:3])
        tcfg = cfgmod.train_config(conf)
        guid = synthetic_guidance(
            flow_fn, guidance_pairs(mcfg.partition(), mcfg.neighbors))
        model, report = train(video, guid, mcfg, tcfg)
        print(f"{label:28s} psnr {report.final_psnr:.2f} dB")
        return report.final_psnr

    print(f"study: {args.study}")
    if args.study == "alignment":
        run("learned flow", {})
        run("zero flow", {"alignment_mode": "zero"})
        run(f"random flow ({args.random_px:g}px)",
            {"alignment_mode": "random",
             "align_scale_px": str(args.random_px)})
    elif args.study == "gop":
        sizes = [int(s) for s in args.gop_sizes.split(",")]
        m0 = -(-video.shape[0] // sizes[0])
        for n in sizes:
            m = -(-video.shape[0] // n)
            feats = max(1, round(int(base.get("latent_feats", 2)) * m0 / m))
            run(f"gop {n} (feats {feats})",
                {"gop_size": str(n), "latent_feats": str(feats)})
    elif args.study == "modulation":
        run("latent as modulation", {})
        run("latent as direct input", {"latent_mode": "direct"})
    elif args.study == "index-set":
        run("neighbors 0", {"neighbors": "0"})
        run("neighbors 0,1", {"neighbors": "0,1"})
    elif args.study == "static":
        run("with static grid", {})
        run("without static grid", {"static_enabled": "false"})
    else:
        raise ConfigError(f"unknown study: {args.study}")
    return 0


def _add_common(p):
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for frame-parallel decode")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed-order reductions (always on in this build)")


def _add_config_opts(p):
    p.add_argument("--preset", default="default",
                   choices=sorted(cfgmod.PRESETS), help="named size preset")
    p.add_argument("--config", help="flat `key = value` config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key")
    p.add_argument("--seed", type=int, default=None)


def _add_input_opts(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--frames", help="directory of PNG/PPM frames")
    g.add_argument("--synthetic", choices=_SYNTH_KINDS,
                   help="render a synthetic sequence instead")
    p.add_argument("--dims", type=_parse_dims, default=(16, 48, 48),
                   metavar="T,H,W")
    p.add_argument("--velocity", type=_parse_vel, default=(1.0, 0.0),
                   metavar="VX,VY", help="pixels per frame")
    p.add_argument("--omega-deg", type=float, default=1.0,
                   help="rotation degrees per frame")
    p.add_argument("--bg-velocity", type=_parse_vel, default=(0.0, 0.0),
                   metavar="VX,VY")
    p.add_argument("--texture-seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None,
                   help="use only the first N frames")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="nvtm",
        description="Implicit video representation codec: flow-aligned "
                    "multi-resolution latent grids modulating a sinusoidal "
                    "synthesizer.",
        epilog=cfgmod.help_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="sequence dynamics report (SI/TI/ME)")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--gop", type=int, default=10)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--flow-alpha", type=float, default=15.0)
    p.add_argument("--flow-iters", type=int, default=200)
    p.add_argument("--si-min", type=float, default=30.0)
    p.add_argument("--ti-min", type=float, default=20.0)
    p.add_argument("--out", help="write `name si ti me` report here")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("encode", help="train a model on a video")
    _add_input_opts(p)
    _add_config_opts(p)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--quantize", action="store_true",
                   help="store parameters as 8-bit")
    p.add_argument("--report", help="training report CSV")
    p.add_argument("--dump-frames", help="also write the input frames here")
    p.add_argument("--fmt", default="png", choices=("png", "ppm"))
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="decode a model to frames")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shape", type=_parse_dims, default=None, metavar="T,H,W")
    p.add_argument("--fmt", default="png", choices=("png", "ppm"))
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="reconstruction PSNR against frames")
    p.add_argument("--model", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    for name, fn, hlp in (
            ("superres", cmd_superres, "decode at doubled spatial size"),
            ("interp", cmd_interp, "decode at doubled temporal size")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--model", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--reference",
                       help="frames at the target lattice for PSNR")
        p.add_argument("--fmt", default="png", choices=("png", "ppm"))
        p.set_defaults(fn=fn)

    p = sub.add_parser("inpaint",
                       help="train with random boxes excluded, report "
                            "masked-region PSNR vs copy-previous-frame")
    _add_input_opts(p)
    _add_config_opts(p)
    p.add_argument("--out", help="optional model file")
    p.add_argument("--mask-count", type=int, default=10)
    p.add_argument("--mask-side", type=int, default=None)
    p.add_argument("--mask-seed", type=int, default=0)
    p.set_defaults(fn=cmd_inpaint)

    p = sub.add_parser("export", help="grid-as-video export layout")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true",
                   help="re-import and compare decodes")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired small training studies")
    p.add_argument("--study", required=True,
                   choices=("alignment", "gop", "modulation", "index-set",
                            "static"))
    p.add_argument("--dims", type=_parse_dims, default=(16, 48, 48),
                   metavar="T,H,W")
    p.add_argument("--velocity", type=_parse_vel, default=(1.5, 0.8),
                   metavar="VX,VY")
    p.add_argument("--texture-seed", type=int, default=0)
    p.add_argument("--random-px", type=float, default=4.0)
    p.add_argument("--gop-sizes", default="4,16")
    p.add_argument("--preset", default="small",
                   choices=sorted(cfgmod.PRESETS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_ablate)

    for p in sub.choices.values():
        _add_common(p)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except NvtmError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
