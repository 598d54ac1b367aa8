"""Command-line surface: train / eval / synth / ablate / gradcheck / report.

Exit codes are a stable contract for scripting: 0 success, 2 usage error,
3 data error (bad files, dimension mismatches), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .autodiff import NumericsError, ShapeError
from .config import ConfigError, load_synth_config, load_train_settings
from .data import DataError, load_sparse, save_sparse, synth_generate
from .experiments import (ARMS, GRADCHECK_LIMIT, gradient_check_suite,
                          run_ablation, run_training, summarize_ablation)
from .losses import BatchCompositionError
from .metrics import alignment_report, evaluate
from .model import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _metrics_lines(metrics, corpus):
    lines = []
    for d in sorted(metrics.per_domain_accuracy):
        name = corpus.domain_names[d] if d < len(corpus.domain_names) else str(d)
        lines.append(f"domain={name} n={metrics.n_per_domain[d]} "
                     f"accuracy={metrics.per_domain_accuracy[d]!r}")
    lines.append(f"average_accuracy={metrics.average_accuracy!r}")
    return lines


def _cmd_train(args):
    settings = load_train_settings(args.config)
    corpus = load_sparse(args.data)
    log_fh = open(args.log, "w", encoding="ascii") if args.log else None
    try:
        run = run_training(corpus, settings, log_fh=log_fh)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_checkpoint(args.out, run.model)
    print(f"best_epoch={run.history.best_epoch} "
          f"best_dev_acc={run.history.best_dev_acc!r}")
    for line in _metrics_lines(run.test_metrics, corpus):
        print(f"split=test {line}")
    return EXIT_OK


def _cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    corpus = load_sparse(args.data)
    for line in _metrics_lines(evaluate(model, corpus), corpus):
        print(line)
    return EXIT_OK


def _cmd_synth(args):
    cfg = load_synth_config(args.config)
    corpus = synth_generate(cfg)
    save_sparse(corpus, args.out)
    print(f"instances={len(corpus)} feature_dim={corpus.feature_dim} "
          f"domains={corpus.num_domains} classes={corpus.num_classes}")
    return EXIT_OK


def _cmd_ablate(args):
    settings = load_train_settings(args.config)
    corpus = load_sparse(args.data)
    arms = [a.strip() for a in args.arms.split(",") if a.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not arms or not seeds:
        raise ConfigError("ablate needs at least one arm and one seed")
    for arm in arms:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")

    lines = []
    results = run_ablation(corpus, settings, arms, seeds, log=lines.append)
    summary = summarize_ablation(results)
    for arm in arms:
        mean, std = summary[arm]
        lines.append(f"arm={arm} mean={mean!r} std={std!r}")
    for line in lines:
        print(line)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_gradcheck(args):
    worst_overall = 0.0
    for name, err in gradient_check_suite(seed=args.seed).items():
        status = "ok" if err <= GRADCHECK_LIMIT else "fail"
        print(f"op={name} max_rel_err={err:.3e} limit={GRADCHECK_LIMIT:.0e} status={status}")
        worst_overall = max(worst_overall, err)
    if worst_overall > GRADCHECK_LIMIT:
        print(f"gradcheck failed: worst error {worst_overall:.3e} "
              f"exceeds {GRADCHECK_LIMIT:.0e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_report(args):
    model = load_checkpoint(args.ckpt)
    corpus = load_sparse(args.data)
    for line in _metrics_lines(evaluate(model, corpus), corpus):
        print(line)
    rep = alignment_report(model, corpus)
    print(f"domain_within={rep.domain_within!r} domain_between={rep.domain_between!r} "
          f"domain_separation={rep.domain_separation!r}")
    print(f"class_within={rep.class_within!r} class_between={rep.class_between!r} "
          f"category_alignment={rep.category_alignment!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rca",
        description="Multi-domain text classification with contrastively "
                    "aligned universal feature extractors and adversarial training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a corpus file and save the best checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("ablate", help="train ablation arms over seeds and tabulate")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--arms", required=True, help="comma-separated arm names")
    p.add_argument("--seeds", required=True, help="comma-separated integers")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("report", help="metrics plus alignment diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (DataError, ConfigError, ShapeError, BatchCompositionError,
            FileNotFoundError, IsADirectoryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
