"""Command-line entry point: ``c2former <subcommand> ...``.

Exit codes: 0 success, 1 failed check, 2 usage or config error, 3 file-format
error.  Diagnostics go to standard error.
"""
from __future__ import annotations

import argparse
import sys

from c2former.analysis import count_flops, eval_alignment_recovery, gen_scenario
from c2former.autodiff import gradcheck_report
from c2former.block import block_forward, check_inputs, init_params
from c2former.afs import afs_sample, make_reference_grid, predict_offsets
from c2former.fileio import (ConfigError, TensorFileError, emit_pgm, load_config, read_params,
                             read_tensor, write_params, write_tensor)
from c2former.ica import make_descriptors, similarity_matrices

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_FORMAT = 0, 1, 2, 3


class InputMismatch(Exception):
    """Input files do not fit the configuration."""


def _feature_map(path, cfg):
    x = read_tensor(path)
    if x.ndim == 3:
        x = x[None]
    try:
        check_inputs(x, x, cfg)
    except ValueError as exc:
        raise InputMismatch(f"{path}: {exc}") from None
    return x


def _load_block_inputs(args):
    run = load_config(args.config)
    cfg = run.block_config()
    x_rgb = _feature_map(args.rgb, cfg)
    x_ir = _feature_map(args.ir, cfg)
    if x_rgb.shape != x_ir.shape:
        raise InputMismatch("RGB and IR inputs differ in shape")
    return cfg, x_rgb, x_ir, read_params(args.params, cfg)


def cmd_init_params(args):
    cfg = load_config(args.config).block_config()
    write_params(args.out, init_params(cfg))
    return EXIT_OK


def cmd_forward(args):
    cfg, x_rgb, x_ir, params = _load_block_inputs(args)
    out_rgb, out_ir = block_forward(x_rgb, x_ir, params, cfg)
    write_tensor(args.out_rgb, out_rgb)
    write_tensor(args.out_ir, out_ir)
    return EXIT_OK


def _parse_query(text):
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"query must look like 'y,x', got {text!r}") from None
    return y, x


def cmd_attn_map(args):
    cfg, x_rgb, x_ir, params = _load_block_inputs(args)
    Hs, Ws = cfg.reduced_shape
    y, x = args.query
    if not (0 <= y < Hs and 0 <= x < Ws):
        print(f"query {y},{x} outside the {Hs}x{Ws} sampled grid", file=sys.stderr)
        return EXIT_USAGE
    grid = make_reference_grid(cfg.height, cfg.width, cfg.stride)
    dp = predict_offsets(x_rgb, x_ir, params.afs, cfg.stride)
    sampled = afs_sample(x_rgb, x_ir, grid, dp)
    m_rgb, m_ir = similarity_matrices(make_descriptors(*sampled, params.ica))
    m = m_rgb if args.matrix == "rgb" else m_ir
    emit_pgm(m[args.batch, y * Ws + x].reshape(Hs, Ws), args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_config(args.config).block_config()
    report = gradcheck_report(cfg)
    sys.stdout.write(report.to_csv())
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max_rel_err={report.worst:.3e} tol={report.tol:.0e} {verdict}")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_flops(args):
    cfg = load_config(args.config).block_config()
    sys.stdout.write(count_flops(cfg, use_afs=not args.no_afs).to_csv())
    return EXIT_OK


def cmd_calib_sim(args):
    run = load_config(args.config)
    x_rgb, x_ir, shift = gen_scenario(run.scenario())
    report = eval_alignment_recovery(x_rgb, x_ir, shift, args.probe, args.radius)
    print(report.summary())
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(report.to_csv())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="c2former", description="RGB-infrared cross-modal fusion block tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="strict JSON run config")
        return p

    def with_block_inputs(p):
        with_config(p)
        p.add_argument("--rgb", required=True)
        p.add_argument("--ir", required=True)
        p.add_argument("--params", required=True)
        return p

    p = with_block_inputs(sub.add_parser("forward", help="run one block on C2TF inputs"))
    p.add_argument("--out-rgb", required=True)
    p.add_argument("--out-ir", required=True)
    p.set_defaults(func=cmd_forward)

    p = with_block_inputs(sub.add_parser("attn-map", help="write one attention row as a PGM"))
    p.add_argument("--query", required=True, type=_parse_query, help="grid position y,x")
    p.add_argument("--out", required=True)
    p.add_argument("--matrix", choices=("rgb", "ir"), default="rgb",
                   help="rgb: IR queries over RGB keys; ir: RGB queries over IR keys")
    p.add_argument("--batch", type=int, default=0)
    p.set_defaults(func=cmd_attn_map)

    p = with_config(sub.add_parser("gradcheck", help="compare analytic and numeric gradients"))
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("flops", help="print the analytic FLOPs report"))
    p.add_argument("--no-afs", action="store_true", help="count attention on the full map")
    p.set_defaults(func=cmd_flops)

    p = with_config(sub.add_parser("calib-sim", help="run the synthetic alignment experiment"))
    p.add_argument("--probe", choices=("identity", "raw"), default="identity")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--csv", help="write per-query rows to this file")
    p.set_defaults(func=cmd_calib_sim)

    p = with_config(sub.add_parser("init-params", help="write seeded parameters"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TensorFileError, InputMismatch) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
