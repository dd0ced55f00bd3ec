"""Command-line entry point: ``connfuse <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .datamodel import CohortIOError, InvariantError, Stage

log = logging.getLogger("connfuse")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVARIANT, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so errors share one format."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config plumbing

def _scalar_fields(cls) -> list[dataclasses.Field]:
    out = []
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, (bool, int, float, str)) or f.type in ("str | None", "int | None"):
            out.append(f)
    return out


def _flag_type(f: dataclasses.Field):
    if isinstance(f.default, bool):
        return lambda s: {"true": True, "1": True, "false": False, "0": False}[s.lower()]
    if isinstance(f.default, int):
        return int
    if isinstance(f.default, float):
        return float
    return str


def _add_config_flags(parser, cls) -> None:
    group = parser.add_argument_group(f"{cls.__name__} overrides (take precedence over the config file)")
    for f in _scalar_fields(cls):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=_flag_type(f),
                           default=None, metavar=f.name.upper(),
                           help=f"default: {f.default!r}")


def _effective_config(cls, path, args) -> tuple[object, dict]:
    """File values, then flag overrides; returns the config and a provenance map."""
    from .phantom import load_config_file
    values, source = {}, {}
    if path is not None:
        try:
            values = load_config_file(path)
        except FileNotFoundError as exc:
            raise CohortIOError(f"config file not found: {path}") from exc
        except (ValueError, OSError) as exc:
            raise CohortIOError(f"cannot read config {path}: {exc}") from exc
        source = {k: "file" for k in values}
    for f in _scalar_fields(cls):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
            source[f.name] = "flag"
    try:
        cfg = cls.from_dict(values)
    except KeyError as exc:
        raise UsageError(str(exc).strip("'\"")) from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from exc
    for k, v in dataclasses.asdict(cfg).items():
        log.info("config %s = %r (%s)", k, v, source.get(k, "default"))
    return cfg, source


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CohortIOError(f"{what} directory not found: {p}")
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CohortIOError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- subcommands

def cmd_gen_phantom(args) -> int:
    from .datamodel import save_cohort
    from .phantom import PhantomSpec, generate_cohort
    spec, _ = _effective_config(PhantomSpec, args.spec, args)
    t0 = time.perf_counter()
    cohort = generate_cohort(spec, workers=args.threads)
    out = save_cohort(cohort, args.out)
    spec.save(Path(out) / "phantom_spec.json")
    print(f"wrote {len(cohort)} subjects to {out} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .datamodel import load_cohort
    from .plotting import plot_history
    from .training import TrainConfig, init_state, train, write_history
    cohort = load_cohort(_require_dir(args.cohort, "cohort"))
    config, _ = _effective_config(TrainConfig, args.config, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = config.replace(checkpoint_dir=config.checkpoint_dir or str(out),
                            metrics_path=config.metrics_path or str(out / "metrics.csv"))
    (out / "config_effective.json").write_text(json.dumps(config.to_dict(), indent=2))
    state = init_state(config, cohort[0].n, cohort[0].T)

    def report(row):
        log.info("epoch %d total=%.4f cls=%.4f acc=%.3f", row["epoch"], row["loss_total"],
                 row["loss_cls"], row["train_acc"])

    t0 = time.perf_counter()
    state = train(cohort, config, state, on_epoch=report)
    save_checkpoint(out / "checkpoint.npz", state)
    write_history(state.history, config.metrics_path)
    if state.history and not args.no_plots:
        plot_history(state.history, out / "loss_curves.png")
    print(f"trained {state.epoch} epochs in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .datamodel import load_cohort
    from .evaluation import EXPERIMENTS, binary_experiment, fourway_experiment, summary_table, write_results
    cohort = load_cohort(_require_dir(args.cohort, "cohort"))
    state = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    kw = dict(folds=args.folds, seed=args.seed, mode=args.mode, head_epochs=args.head_epochs)
    if args.experiment == "fourway":
        result = fourway_experiment(cohort, state, **kw)
    else:
        pos, neg = EXPERIMENTS[args.experiment]
        result = binary_experiment(cohort, state, pos, neg, **kw)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.experiment}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = result.rows()
    write_results(rows, out)
    print(summary_table(rows))
    print(f"mean acc {result.mean_acc:.4f}; wrote {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import (DEFAULT_TAU_QUANTILES, delta_connectivity, group_mean_mc, tau_from_quantile,
                           top_k_rois, write_edges, write_matrix, write_ranking)
    from .checkpoint import load_checkpoint
    from .datamodel import load_cohort
    from .plotting import plot_delta_thresholds, plot_stage_means, plot_top_rois
    cohort = load_cohort(_require_dir(args.cohort, "cohort"))
    state = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    a, b = Stage.parse(getattr(args, "from")), Stage.parse(args.to)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mean_a = group_mean_mc(cohort, state.model, a, normalized=args.normalized)
    mean_b = group_mean_mc(cohort, state.model, b, normalized=args.normalized)
    write_matrix(mean_a, out / f"mean_mc_{a.name}.csv")
    write_matrix(mean_b, out / f"mean_mc_{b.name}.csv")
    full = delta_connectivity(mean_a, mean_b, 0.0, a, b)
    write_matrix(full.delta, out / f"delta_{a.name}_{b.name}.csv")
    quantiles = [args.tau] if args.tau is not None else list(DEFAULT_TAU_QUANTILES)
    taus = {}
    for q in quantiles:
        if not 0 <= q <= 1:
            raise UsageError(f"--tau must be a quantile in [0, 1], got {q}")
        tau = tau_from_quantile(full.delta, q)
        taus[f"q={q:g}"] = tau
        write_edges(delta_connectivity(mean_a, mean_b, tau, a, b), out / f"edges_{a.name}_{b.name}_q{q:g}.csv")
    ranking = top_k_rois(full, args.topk, center=not args.no_center)
    write_ranking(ranking, out / f"roi_ranking_{a.name}_{b.name}.csv")
    if not args.no_plots:
        plot_stage_means({a.name: mean_a, b.name: mean_b}, out / "mean_mc.png")
        plot_delta_thresholds(full.delta, taus, out / f"delta_{a.name}_{b.name}.png",
                              title=f"{a.name} -> {b.name}")
        plot_top_rois(full.delta, [i for i, _ in ranking], out / f"top_rois_{a.name}_{b.name}.png",
                      title=f"top-{args.topk} ROIs {a.name} -> {b.name}")
    print("rank,roi,score")
    for r, (i, s) in enumerate(ranking, 1):
        print(f"{r},{i},{s:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite
    t0 = time.perf_counter()
    results = run_suite(args.scale, n_probes=args.probes, seed=args.seed)
    width = max(len(r.op) for r in results)
    for r in results:
        print(f"{r.op:<{width}}  {r.max_rel_err:.3e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r.op for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} ops below {TOLERANCE:g} "
          f"({time.perf_counter() - t0:.1f}s)")
    if bad:
        raise GradientMismatch(f"gradient check failed for: {', '.join(bad)}")
    return EXIT_OK


class GradientMismatch(FloatingPointError):
    pass


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    from .phantom import PhantomSpec
    from .training import TrainConfig
    p = _Parser(prog="connfuse", description="Structure-function connectome fusion GAN on phantom cohorts.")
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS threads and worker pools")
    p.add_argument("-v", "--verbose", action="store_true", help="log effective config and progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-phantom", help="write a synthetic cohort")
    g.add_argument("--spec", help="PhantomSpec config file (JSON or YAML)")
    g.add_argument("--out", required=True, help="cohort directory")
    _add_config_flags(g, PhantomSpec)
    g.set_defaults(func=cmd_gen_phantom)

    t = sub.add_parser("train", help="train the fusion model on a cohort")
    t.add_argument("--cohort", required=True)
    t.add_argument("--config", help="TrainConfig config file (JSON or YAML)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--no-plots", action="store_true")
    _add_config_flags(t, TrainConfig)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="k-fold classification metrics from a checkpoint")
    e.add_argument("--cohort", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--experiment", required=True, choices=["ad-nc", "lmci-nc", "emci-nc", "fourway"])
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--mode", choices=["renormalize", "head", "finetune"], default="head",
                   help="how each train fold adapts the checkpoint (default: retrain classifier head)")
    e.add_argument("--head-epochs", type=int, default=100)
    e.add_argument("--out", help="metrics CSV path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="stage deltas, ROI ranking and heatmaps")
    a.add_argument("--cohort", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--from", required=True, help="stage name, e.g. NC")
    a.add_argument("--to", required=True, help="stage name, e.g. AD")
    a.add_argument("--tau", type=float, help="threshold quantile of |delta| (default: sweep 0.5, 0.7, 0.9)")
    a.add_argument("--topk", type=int, default=8)
    a.add_argument("--normalized", action="store_true", help="use the normalized MC the heads see")
    a.add_argument("--no-center", action="store_true",
                   help="rank ROIs on the raw delta instead of subtracting its median shift first")
    a.add_argument("--out", default="analysis", help="output directory")
    a.add_argument("--no-plots", action="store_true")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--scale", choices=["small", "full"], default="small")
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"error code={code} kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .numerics import NonFiniteError
    from .training import NumericalFailure
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", exc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_USAGE, "usage", "missing subcommand")
    if args.threads < 1:
        return _fail(EXIT_USAGE, "usage", "--threads must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (CohortIOError, CheckpointError, OSError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except (NumericalFailure, NonFiniteError, GradientMismatch, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except (InvariantError, ValueError) as exc:
        return _fail(EXIT_INVARIANT, "invariant", exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
