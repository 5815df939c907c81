"""Command-line entry point: simulate, train-flow, bench, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .flow import DivergenceError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DIVERGENCE = 4

log = logging.getLogger("flowcoop")


def cmd_simulate(args) -> int:
    from . import experiment

    cfg = load_config(args.config)
    params = experiment.load_params(cfg, Path(args.config).resolve().parent)
    cells = experiment.run_sweep(cfg, params)
    report = experiment.build_report(cfg, cells)
    out = Path(args.out)
    for path in experiment.write_report(report, out, cfg.run.figures and not args.no_figures):
        log.info("wrote %s", path)
    if args.dump_frames:
        experiment.dump_frames(cells, out / "frames")
    return EXIT_OK


def cmd_train_flow(args) -> int:
    from . import experiment

    cfg = load_config(args.config)
    if cfg.scenario.num_frames < cfg.flow.k_max + 2:
        raise ConfigError(f"train-flow needs at least k_max + 2 = {cfg.flow.k_max + 2} frames")
    rep = experiment.train_estimator(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {
        "training": rep.to_dict(),
        "metadata": {"tool": "flowcoop", "version": __version__, "seed": cfg.flow.seed,
                     "config_hash": cfg.config_hash()},
    }
    rep.result.params.save(out, extra)
    if cfg.run.figures and not args.no_figures:
        from . import plotting

        fig = out.with_suffix(".loss.png")
        plotting.training_curve(rep.result.initial_loss, rep.result.epoch_losses, fig,
                                (rep.holdout_before, rep.holdout_after))
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import experiment

    cfg = load_config(args.config)
    print(json.dumps(experiment.bench(cfg), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import experiment

    cfg = load_config(args.config)
    res = experiment.evaluate_files(args.pred, args.gt, cfg)
    print(json.dumps(res.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowcoop", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="latency x fusion-mode sweep, CSV/JSON report plus figures")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--dump-frames", action="store_true", help="also write per-run pred/GT JSONL files")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train-flow", help="self-supervised estimator training on infrastructure frames")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="parameter file (JSON)")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train_flow)

    b = sub.add_parser("bench", help="codec and pipeline throughput, packet sizes")
    b.add_argument("--config", required=True)
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="score a prediction JSONL file against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--config", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
