"""Command-line interface: ``msra <subcommand> [flags]``.

Errors are printed as one line on stderr,
``error kind=<kind> invariant=<name> message="<text>"``, with a nonzero exit.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, SystemConfig, load_config

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, invariant: str = "", code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind, self.invariant, self.code = kind, invariant, code


def _error_line(kind: str, message: str, invariant: str = "") -> str:
    msg = message.replace('"', "'").replace("\n", " ")
    return f'error kind={kind} invariant={invariant or "-"} message="{msg}"'


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line usage errors, unknown flags included
        raise CliError("usage", message, code=EXIT_USAGE)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _pos(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common(p: argparse.ArgumentParser, config: bool = True):
    if config:
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=_u64, metavar="U64", help="master seed override")
    p.add_argument("--trials", type=_nonneg, metavar="N")
    p.add_argument("--workers", type=_pos, default=1, metavar="N")
    p.add_argument("--out", metavar="DIR")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="msra", description="Grant-free random access link-level simulator.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("coherence", help="2-Babel coherence and isometry constant over random supports")
    _common(p)
    p.add_argument("--n-active", type=str, metavar="LIST", help="comma-separated support sizes")

    p = sub.add_parser("sweep", help="Monte Carlo sweep over one axis")
    _common(p)
    p.add_argument("--axis", default="N_a", choices=("N_a", "L", "snr_db", "upsilon", "N_c"))
    p.add_argument("--values", metavar="LIST", help="comma-separated axis values")
    p.add_argument("--oracle", action="store_true", help="give the receiver the true support")
    p.add_argument("--dump-trials", type=_nonneg, default=0, metavar="N")
    p.add_argument("--dry-run", action="store_true")

    p = sub.add_parser("bound", help="single-group and frame misdetection bounds")
    _common(p)

    p = sub.add_parser("reproduce-fig", help="run a figure recipe")
    p.add_argument("recipe")
    _common(p, config=False)
    p.add_argument("--scale", choices=("full", "desk"), default="desk")

    p = sub.add_parser("validate-config", help="check a config file against every invariant")
    p.add_argument("--config", metavar="PATH", required=True)
    return ap


def _load(args) -> SystemConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else SystemConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(master_seed=args.seed)
    return cfg


def _list(text: str | None, cast):
    if not text:
        return None
    try:
        return [cast(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError("usage", f"cannot parse list {text!r}", code=EXIT_USAGE) from None


def _axis_cast(axis: str):
    if axis in ("L", "snr_db"):
        return float
    if axis == "N_a":
        return lambda t: float(t) if "." in t else int(t)
    return int


def cmd_validate(args, out) -> int:
    cfg = load_config(args.config)
    print(f"ok config_hash={cfg.config_hash()} N_g={cfg.N_g}", file=out)
    return 0


def cmd_coherence(args, out) -> int:
    from .recipes import mean_ci, support_coherence
    from .waveform import build_signature_pool, gen_base_pool, isometry_constant, signature_atoms
    from .config import rng_for

    cfg = _load(args)
    sizes = _list(args.n_active, int) or [int(cfg.n_active)]
    draws = 1000 if args.trials is None else args.trials
    base = gen_base_pool(cfg)
    atoms = signature_atoms(base, build_signature_pool(base, cfg))
    lines = ["n_active,draws,mu2_mean,mu2_ci_low,mu2_ci_high,delta_mean"]
    for n in sizes:
        if not 0 <= n <= cfg.N_T:
            raise CliError("usage", f"support size {n} outside 0..N_T", code=EXIT_USAGE)
        mu = support_coherence(cfg, n, draws)
        rng = rng_for(cfg.master_seed, "coherence-delta", n)
        delta = [isometry_constant(atoms, rng.choice(cfg.N_T, n, replace=False)) for _ in range(min(draws, 200))]
        m, lo, hi = mean_ci(mu)
        lines.append(f"{n},{draws},{m:.10g},{lo:.10g},{hi:.10g},{float(np.mean(delta)) if delta else 0:.10g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "coherence.csv").write_text(text)
    out.write(text)
    return 0


def cmd_sweep(args, out) -> int:
    from .harness import SweepSpec, dry_run_lines, run_sweep

    cfg = _load(args)
    values = _list(args.values, _axis_cast(args.axis))
    if values is None:
        values = [cfg.n_active] if args.axis == "N_a" else [getattr(cfg, {"L": "n_active"}.get(args.axis, args.axis))]
        if args.axis == "L":
            values = [cfg.n_active / cfg.M]
    trials = 100 if args.trials is None else args.trials
    spec = SweepSpec(cfg, args.axis, values, trials, None if args.dry_run else args.out, oracle=args.oracle,
                     dump_trials=args.dump_trials)
    if args.dry_run:
        spec.configs()
        for line in dry_run_lines(spec):
            print(line, file=out)
        return 0
    manifest, points = run_sweep(spec, workers=args.workers)
    if not args.out:
        from .metrics import write_summary_csv

        out.write(write_summary_csv(points))
    else:
        print(f"wrote {Path(args.out) / 'summary.csv'} valid={'true' if manifest.valid else 'false'}", file=out)
    return 0 if manifest.valid else EXIT_RUNTIME


def cmd_bound(args, out) -> int:
    from .harness import bound_sample, build_context, trial_seed
    from .metrics import bound_frame

    cfg = _load(args)
    trials = 20 if args.trials is None else args.trials
    ctx = build_context(cfg)
    lines = ["trial,c,d,eta,gamma,applicable,premise_gamma_disagree,single_bound,frame_bound,group0_missed"]
    raws, missed = [], []
    for t in range(trials):
        s = bound_sample(ctx, trial_seed(cfg.master_seed, 0, t))
        missed.append(s.group_missed)
        if s.inputs is None:
            lines.append(f"{t},nan,nan,nan,nan,false,false,nan,nan,{str(s.group_missed).lower()}")
            continue
        i = s.inputs
        fb = bound_frame(i, cfg.N_g)
        raws.append(s.raw)
        lines.append(f"{t},{i.c_lambda:.6g},{i.d_lambda:.6g},{i.eta:.6g},{i.gamma_lambda:.6g},"
                     f"{str(s.applicable).lower()},{str(i.premise_gamma_disagree).lower()},"
                     f"{s.raw:.6g},{fb.closed_form:.6g},{str(s.group_missed).lower()}")
    finite = [r for r in raws if math.isfinite(r)]
    lines.append(f"# mean_single_bound={np.mean(finite) if finite else float('nan'):.6g} "
                 f"empirical_group0_miss={np.mean(missed) if missed else float('nan'):.6g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bound.csv").write_text(text)
    out.write(text)
    return 0


def cmd_reproduce(args, out) -> int:
    from .recipes import RECIPE_IDS, reproduce_figure

    if args.recipe not in RECIPE_IDS:
        raise CliError("unknown_recipe", f"unknown recipe {args.recipe!r}; known: {','.join(RECIPE_IDS)}",
                       code=EXIT_USAGE)
    paths = reproduce_figure(args.recipe, args.scale, args.out or f"out/{args.recipe}-{args.scale}",
                             trials=args.trials, workers=args.workers, master_seed=args.seed)
    for p in paths:
        print(f"wrote {p}", file=out)
    return 0


COMMANDS = {"validate-config": cmd_validate, "coherence": cmd_coherence, "sweep": cmd_sweep,
            "bound": cmd_bound, "reproduce-fig": cmd_reproduce}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, out)
    except CliError as e:
        print(_error_line(e.kind, str(e), e.invariant), file=err)
        return e.code
    except ConfigError as e:
        print(_error_line("config", str(e), e.invariant), file=err)
        return EXIT_CONFIG
    except OSError as e:
        print(_error_line("io", str(e)), file=err)
        return EXIT_RUNTIME
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
