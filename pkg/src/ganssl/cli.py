"""``ganssl`` command-line entry point.

Exit codes: 0 success, 1 usage/validation error or failed verification,
2 aborted training run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, describe_keys, load_config
from .datasets import DatasetError

EXIT_OK, EXIT_ERROR, EXIT_ABORTED = 0, 1, 2

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_args(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="config override, applied after the file (repeatable, last wins)")
    p.add_argument("--data-dir", help="dataset directory (default: $GANSSL_DATA_DIR)")
    p.add_argument("--allow-download", action="store_true", help="fetch missing dataset files")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ganssl",
        description="Semi-supervised GAN experiments (bad GAN, good GAN, supervised baseline).",
        epilog="config keys (section.key = default):\n" + describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)

    p = sub.add_parser("train", help="run one experiment")
    _config_args(p)

    p = sub.add_parser("sweep", help="run a labeled-count or batch-size sweep over seeds")
    _config_args(p)
    p.add_argument("--parallel", type=int, help="concurrent cells (default: sweep.parallel)")

    for verb, text in (("generate", "write a sample grid from a trained run"),
                       ("interpolate", "write a latent interpolation grid from a trained good-GAN run")):
        p = sub.add_parser(verb, help=text)
        p.add_argument("run_dir")
        p.add_argument("--checkpoint", default="checkpoints/final.ckpt")
        p.add_argument("--output", help="PNG path (default: inside run_dir)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--force", action="store_true")
        if verb == "generate":
            p.add_argument("--columns", type=int, default=10, help="latents per class / grid columns")
        else:
            p.add_argument("--steps", type=int, default=10)

    p = sub.add_parser("report", help="Markdown summary of every run under a directory")
    p.add_argument("run_dir")
    p.add_argument("--output")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("verify", help="run the acceptance checks and print pass/fail per check")
    p.add_argument("--fast", action="store_true", help="only oracle and plumbing checks")
    p.add_argument("--only", help="comma-separated check numbers")
    p.add_argument("--data-dir")
    p.add_argument("--work-dir", help="where training checks keep their runs")
    p.add_argument("--output", help="write results as JSON (report picks up acceptance.json)")
    return parser


def _load(args):
    overrides = list(args.override)
    if args.data_dir:
        overrides.insert(0, f"data.data_dir={args.data_dir}")
    if args.allow_download:
        overrides.insert(0, "data.allow_download=true")
    return load_config(args.config, overrides)


def _write_guard(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def cmd_train(args) -> int:
    from .harness import run_dir_for, run_experiment

    cfg = _load(args)
    record = run_experiment(cfg, force=args.force)
    out = run_dir_for(cfg)
    if record.status == "aborted":
        print(f"aborted: {record.message}\nrecord: {out / 'record.json'}")
        return EXIT_ABORTED
    print(f"{record.run_id}: final test accuracy {record.final_test_accuracy:.2f}%\nrecord: {out / 'record.json'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import SweepSpec, run_sweep

    cfg = _load(args)
    spec = SweepSpec.from_config(cfg)
    result = run_sweep(spec, parallel=args.parallel or cfg.sweep.parallel, force=args.force)
    print((result["dir"] / "summary.md").read_text(), end="")
    print(f"summary: {result['dir'] / 'summary.csv'}")
    return EXIT_ABORTED if any(r.status == "aborted" for r in result["records"]) else EXIT_OK


def cmd_generate(args) -> int:
    import torch

    from . import goodgan
    from .harness import load_run_networks

    cfg, nets = load_run_networks(args.run_dir, args.checkpoint)
    g = nets.get("generator")
    if g is None:
        raise UsageError(f"{cfg.experiment.model} runs have no generator")
    gen = torch.Generator().manual_seed(args.seed)
    latents = torch.rand(args.columns, g.z_dim, generator=gen)
    if g.conditional:
        grid = goodgan.conditional_grid(g, list(range(g.num_classes)), latents)
    else:
        latents = torch.rand(args.columns * args.columns, g.z_dim, generator=gen)
        grid = goodgan.unconditional_grid(g, latents, args.columns)
    out = Path(args.output or Path(args.run_dir) / f"generated_s{args.seed}.png")
    _write_guard(out, args.force)
    goodgan.save_png(out, grid)
    print(out)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    import torch

    from . import goodgan
    from .harness import load_run_networks

    cfg, nets = load_run_networks(args.run_dir, args.checkpoint)
    g = nets.get("generator")
    if g is None or not g.conditional:
        raise UsageError("interpolation needs a good-GAN run (conditional generator)")
    gen = torch.Generator().manual_seed(args.seed)
    z1, z2 = torch.rand(2, g.z_dim, generator=gen)
    grid = goodgan.interpolation_grid(g, z1, z2, args.steps, list(range(g.num_classes)))
    out = Path(args.output or Path(args.run_dir) / f"interpolation_s{args.seed}.png")
    _write_guard(out, args.force)
    goodgan.save_png(out, grid)
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    import json

    from .harness import find_records
    from .report import render_report

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    acc = run_dir / "acceptance.json"
    text = render_report(find_records(run_dir), json.loads(acc.read_text()) if acc.exists() else None)
    out = Path(args.output or run_dir / "report.md")
    if out.exists() and out.read_text() != text:
        _write_guard(out, args.force)
    out.write_text(text)
    print(out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks, write_results

    only = {int(x) for x in args.only.split(",")} if args.only else None
    results = run_checks(fast=args.fast, data_dir=args.data_dir, work_dir=args.work_dir, only=only,
                         echo=lambda line: print(line, flush=True))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} checks passed")
    if args.output:
        write_results(args.output, results)
    return EXIT_OK if passed == len(results) else EXIT_ERROR


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "generate": cmd_generate, "interpolate": cmd_interpolate,
            "report": cmd_report, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.verb:
            parser.print_help(sys.stderr)
            return EXIT_ERROR
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.verb](args)
    except (UsageError, ConfigError, DatasetError, FileNotFoundError, FileExistsError, ValueError) as err:
        print(f"ganssl: error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
