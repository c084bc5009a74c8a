"""Command-line front end.

Subcommands:

* ``run``        one training run; writes trace.csv and summary.json
* ``experiment`` a named experiment grid; one CSV per run plus a summary
* ``validate``   parse and validate a model file

Exit codes: 0 success, 2 validation/configuration error, 3 run failure.
``PLATEVI_THREADS`` caps the numeric backend's internal parallelism; it is
applied before numpy is imported, so heavyweight imports stay inside the
command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("PLATEVI_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _card_pair(text: str) -> tuple[str, int]:
    name, _, value = text.partition("=")
    if not name or not value or not value.isdigit():
        raise argparse.ArgumentTypeError(f"expected NAME=N, got {text!r}")
    return name, int(value)


def _hidden_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="platevi",
        description="Plate-amortized stochastic variational inference for hierarchical models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configuration")
    run.add_argument("--model", required=True,
                     help="model file path, or a bundled name (gre, hv)")
    run.add_argument("--scheme", default="pavi-f",
                     choices=["pavi-f", "pavi-e", "svi-baseline"])
    run.add_argument("--card", type=_card_pair, action="append", default=[],
                     metavar="NAME=N", help="override a plate's full cardinality")
    run.add_argument("--card-reduced", type=_card_pair, action="append", default=[],
                     metavar="NAME=N", help="override a plate's reduced cardinality")
    run.add_argument("--dim", type=int, default=None, help="override the feature dimension")
    run.add_argument("--encoding-size", type=int, default=8)
    run.add_argument("--flow", default="affine", choices=["affine", "maf"])
    run.add_argument("--hidden", type=_hidden_list, default=(32, 32),
                     metavar="A,B", help="MAF hidden layer sizes")
    run.add_argument("--triangular", action="store_true",
                     help="triangular scaling in the affine block")
    run.add_argument("--steps", type=int, default=2000)
    run.add_argument("--lr", type=float, default=1e-2)
    run.add_argument("--mc-samples", type=int, default=8)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--data-seed", type=int, default=None,
                     help="seed for the prior draw of the data (default: seed + 1)")
    run.add_argument("--sample-amortized", action="store_true")
    run.add_argument("--eval-every", type=int, default=0)
    run.add_argument("--plateau-window", type=int, default=500)
    run.add_argument("--plateau-tol", type=float, default=1e-3)
    run.add_argument("--virtual-clock", action="store_true",
                     help="deterministic wall_seconds column (one tick per step)")
    run.add_argument("--out", required=True)

    exp = sub.add_parser("experiment", help="run a named experiment grid")
    exp.add_argument("--name", required=True)
    exp.add_argument("--out", required=True)
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--data-samples", type=int, default=20)
    exp.add_argument("--repetitions", type=int, default=5)
    exp.add_argument("--steps", type=int, default=None)
    exp.add_argument("--eval-every", type=int, default=50)
    exp.add_argument("--virtual-clock", action="store_true")

    val = sub.add_parser("validate", help="parse and validate a model file")
    val.add_argument("--model", required=True)
    return parser


def _load_graph(model_arg: str, cards, reduced, dim):
    from .modelfile import ModelFileError, load_bundled, parse_model, with_overrides

    if Path(model_arg).exists():
        graph = parse_model(model_arg)
    else:
        try:
            graph = load_bundled(model_arg)
        except FileNotFoundError:
            raise ModelFileError(model_arg, 0, 0, "no such file or bundled model")
    return with_overrides(graph, cards=dict(cards), reduced=dict(reduced), dim=dim)


def _cmd_run(args) -> int:
    from .experiments import execute_run, make_family
    from .family import FamilyConfig
    from .model import ValidationError
    from .modelfile import ModelFileError
    from .trainer import ConfigError, TrainConfig, train

    try:
        graph = _load_graph(args.model, args.card, args.card_reduced, args.dim)
        fam_cfg = FamilyConfig(
            flow=args.flow, hidden=args.hidden, triangular=args.triangular,
            encoding_dim=args.encoding_size, init_seed=args.seed,
        )
        train_cfg = TrainConfig(
            learning_rate=args.lr, mc_samples=args.mc_samples, max_steps=args.steps,
            seed=args.seed, sample_amortized=args.sample_amortized,
            eval_every=args.eval_every, plateau_window=args.plateau_window,
            plateau_tol=args.plateau_tol, virtual_clock=args.virtual_clock,
        )
        data_seed = args.data_seed if args.data_seed is not None else args.seed + 1
    except (ModelFileError, ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    try:
        if args.sample_amortized:
            # amortized runs draw fresh data per step from the prior
            import numpy as np

            from .experiments import generate_data, oracle_summary

            out.mkdir(parents=True, exist_ok=True)
            family = make_family(graph, args.scheme, fam_cfg)
            model = graph.ground("full")

            def generator(rng):
                _, x = model.sample_prior(rng)
                return x

            trace = train(family, model, generator, train_cfg)
            trace.to_csv(out / "trace.csv")
            summary = trace.summary()
            summary.update({"scheme": args.scheme, "seed": args.seed,
                            "sample_amortized": True, "flow": args.flow,
                            "encoding_size": args.encoding_size})
            eval_x = generate_data(graph, data_seed)
            summary.update(oracle_summary(graph, eval_x))
            with open(out / "summary.json", "w") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
        else:
            summary = execute_run(out, graph, args.scheme, fam_cfg, train_cfg, data_seed)
        print(json.dumps(summary, indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    if summary.get("status") == "halted-nonfinite":
        print("run halted on repeated non-finite steps", file=sys.stderr)
        return 3
    return 0


def _cmd_experiment(args) -> int:
    from .experiments import ExperimentSpec, run_experiment

    try:
        spec = ExperimentSpec(
            name=args.name, out=args.out, seed=args.seed,
            data_samples=args.data_samples, repetitions=args.repetitions,
            max_steps=args.steps, eval_every=args.eval_every,
            virtual_clock=args.virtual_clock,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = run_experiment(spec)
    failures = [r for r in summary.get("runs", []) if r.get("status") == "failed"]
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2, sort_keys=True))
    if failures:
        print(f"{len(failures)} run(s) failed; see {args.out}/summary.json", file=sys.stderr)
        return 3
    return 0


def _cmd_validate(args) -> int:
    from .modelfile import ModelFileError, parse_model, serialize_model

    try:
        graph = parse_model(args.model)
    except (ModelFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(serialize_model(graph))
    return 0


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "experiment":
        return _cmd_experiment(args)
    return _cmd_validate(args)


if __name__ == "__main__":
    sys.exit(main())
