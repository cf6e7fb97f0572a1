"""Command line experiment runner.

Three sub-commands share the same options (``--config``, ``--seed``, ``--out`` and
repeatable ``--set key.sub=value`` overrides):

    %(prog)s run --config exp.json --out runs/exp
    %(prog)s compare --config exp.json --methods sacfl fedavg fedprox --out runs/cmp
    %(prog)s diagnose-layers --config exp.json --out runs/layers

``run`` writes ``manifest.json`` (before training), ``metrics.csv`` and
``summary.json``. ``compare`` runs several methods on the same stream and writes
``comparison.csv`` and ``curves.csv`` plus one sub-directory per method.
``diagnose-layers`` writes ``layers.csv`` and ``diagnosis.json``.

Exit status: 0 success, 2 invalid configuration or input data, 3 drift threshold
calibration failure, 4 non-finite values during training, 5 a broken internal
contract such as a missing pool entry. ``SACFL_THREADS`` caps the threads
used for the clients of a round.
"""
import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .config import METHODS, ConfigError, ConfigLoader, ExperimentConfig
from .data_gen import IdxFormatError
from .errors import (
    ContractViolation,
    DimensionError,
    NumericalError,
    PoolLookupError,
    ValidationError,
)
from .orchestrator import (
    CalibrationError,
    RoundMetrics,
    Simulation,
    diagnose_layers,
)

__all__ = [
    "RunManifest",
    "metrics_columns",
    "metrics_row",
    "cmd_run",
    "cmd_compare",
    "cmd_diagnose_layers",
    "parse_args",
    "main",
    "run",
]

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_NUMERICAL = 4
EXIT_CONTRACT = 5

DISTANCES = ("manhattan", "euclidean", "cosine")


@dataclass(frozen=True)
class RunManifest:
    config_path: str
    config: Dict[str, Any]
    seed: int
    out_dir: str
    config_hash: str
    version: str

    @classmethod
    def create(cls, config_path, cfg: ExperimentConfig, out_dir) -> "RunManifest":
        from . import __version__

        return cls(
            str(config_path),
            cfg.to_dict(),
            cfg.seed,
            str(out_dir),
            cfg.content_hash(),
            __version__,
        )

    def write(self, path: Path):
        _write_json(path, asdict(self))


def _fmt(value: Optional[float]) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return format(float(value), ".17g")


def _write_json(path: Path, payload: Any):
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True)
        fp.write("\n")


def metrics_columns(num_tasks: int, num_clients: int) -> List[str]:
    """Column order of ``metrics.csv``"""
    return [
        "round",
        "task",
        "avg_accuracy",
        "train_loss",
        "drift",
        "drift_clients",
        "attack",
        "degrade",
        "aggregator",
        "participants",
        *(f"acc_task_{t}" for t in range(num_tasks)),
        *(f"max_diff_{name}" for name in DISTANCES),
        *(f"diff_client_{k}" for k in range(num_clients)),
    ]


def metrics_row(m: RoundMetrics, num_tasks: int, num_clients: int) -> List[str]:
    row = [
        str(m.round),
        str(m.task),
        _fmt(m.avg_accuracy),
        _fmt(m.train_loss),
        str(int(m.drift)),
        " ".join(str(k) for k in m.drift_clients),
        str(int(m.attack)),
        _fmt(m.degrade),
        m.aggregator,
        " ".join(str(k) for k in m.participants),
    ]
    row.extend(_fmt(m.accuracies.get(t)) for t in range(num_tasks))
    for name in DISTANCES:
        values = [d[name] for d in m.distances.values() if not math.isnan(d[name])]
        row.append(_fmt(max(values)) if values else "")
    row.extend(_fmt(m.diffs.get(k)) for k in range(num_clients))
    return row


def write_metrics(path: Path, metrics: Sequence[RoundMetrics], sim: Simulation):
    num_tasks, num_clients = sim.env.num_tasks, sim.cfg.num_clients
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(metrics_columns(num_tasks, num_clients))
        for m in metrics:
            writer.writerow(metrics_row(m, num_tasks, num_clients))


def _load(
    config_file, overrides: Sequence[str], seed: Optional[int]
) -> ExperimentConfig:
    extra = list(overrides)
    if seed is not None:
        extra.append(f"seed={seed}")
    return ConfigLoader(extra).read(config_file)


def _guarded(action):
    """Run ``action`` and translate simulator failures into exit codes"""
    try:
        return action()
    except FileNotFoundError as ex:
        _logger.error("%s", ex)
        return EXIT_CONFIG
    except ConfigError as ex:
        print(ex, file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, DimensionError, IdxFormatError) as ex:
        _logger.error("invalid experiment: %s", ex)
        return EXIT_CONFIG
    except CalibrationError as ex:
        _logger.error("%s", ex)
        return EXIT_CALIBRATION
    except NumericalError as ex:
        _logger.error("%s", ex)
        return EXIT_NUMERICAL
    except (ContractViolation, PoolLookupError) as ex:
        _logger.error("internal error: %s", ex)
        return EXIT_CONTRACT


def _simulate(cfg: ExperimentConfig, out: Path, config_file) -> Simulation:
    out.mkdir(parents=True, exist_ok=True)
    RunManifest.create(config_file, cfg, out).write(out / "manifest.json")
    sim = Simulation(cfg)
    metrics = sim.run()
    write_metrics(out / "metrics.csv", metrics, sim)
    _write_json(out / "summary.json", sim.summary())
    _logger.info("results written to %s", out)
    return sim


def cmd_run(
    config_file, overrides: Sequence[str] = (), out_dir=".", seed: Optional[int] = None
) -> int:
    """Run one experiment and write its metrics, summary and manifest"""

    def action():
        cfg = _load(config_file, overrides, seed)
        sim = _simulate(cfg, Path(out_dir), config_file)
        print(f"final average accuracy: {sim.summary()['final_avg_accuracy']}")
        return EXIT_OK

    return _guarded(action)


def cmd_compare(
    config_file,
    methods: Sequence[str],
    overrides: Sequence[str] = (),
    out_dir=".",
    seed: Optional[int] = None,
) -> int:
    """Run every method in ``methods`` on the same stream and tabulate the results"""

    def action():
        cfg = _load(config_file, overrides, seed)
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            err = ConfigError("<command line>")
            choices = ", ".join(METHODS)
            err.append(0, f"unknown methods {unknown}, choose from {choices}")
            raise err
        out = Path(out_dir)
        runs = {}
        for method in methods:
            variant = cfg.replace(method=method)
            runs[method] = _simulate(variant, out / method, config_file)
        _write_comparison(out, runs)
        for method, sim in runs.items():
            print(f"{method}: {sim.summary()['final_avg_accuracy']}")
        return EXIT_OK

    return _guarded(action)


def _write_comparison(out: Path, runs: Dict[str, Simulation]):
    num_tasks = max(sim.env.num_tasks for sim in runs.values())
    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        tasks = [f"acc_task_{t}" for t in range(num_tasks)]
        writer.writerow(["method", "final_avg_accuracy", *tasks])
        for method, sim in runs.items():
            last = sim.metrics[-1]
            accs = [_fmt(last.accuracies.get(t)) for t in range(num_tasks)]
            writer.writerow([method, _fmt(last.avg_accuracy), *accs])
    with open(out / "curves.csv", "w", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["round", *runs])
        rounds = max(len(sim.metrics) for sim in runs.values())
        for i in range(rounds):
            values = [
                _fmt(sim.metrics[i].avg_accuracy) if i < len(sim.metrics) else ""
                for sim in runs.values()
            ]
            writer.writerow([str(i), *values])


def cmd_diagnose_layers(
    config_file, overrides: Sequence[str] = (), out_dir=".", seed: Optional[int] = None
) -> int:
    """Record per-layer parameter changes of a single client across tasks"""

    def action():
        cfg = _load(config_file, overrides, seed)
        out = Path(out_dir)
        diagnosis = diagnose_layers(cfg)
        out.mkdir(parents=True, exist_ok=True)
        layers = diagnosis.per_round[0].size
        with open(out / "layers.csv", "w", encoding="utf-8", newline="") as fp:
            writer = csv.writer(fp, lineterminator="\n")
            writer.writerow(
                ["round", "boundary"]
                + [f"change_layer_{idx}" for idx in range(layers)]
                + [f"since_task0_layer_{idx}" for idx in range(layers)]
            )
            for i, (step, since) in enumerate(
                zip(diagnosis.per_round, diagnosis.since_first_task)
            ):
                tail = [""] * layers if since is None else [_fmt(x) for x in since]
                boundary = str(int(i in diagnosis.boundaries))
                writer.writerow([str(i), boundary, *(_fmt(x) for x in step), *tail])
        verdict = "degenerate" if diagnosis.degenerate else (
            "pass" if diagnosis.passed else "fail"
        )
        _write_json(
            out / "diagnosis.json",
            {
                "verdict": verdict,
                "final_change": [float(x) for x in diagnosis.final_change],
                "boundaries": diagnosis.boundaries,
            },
        )
        print(f"layer sensitivity: {verdict}")
        return EXIT_OK

    return _guarded(action)


# ---- Command line interface ----


def parse_args(args: Sequence[str]) -> argparse.Namespace:
    """Parse command line parameters

    Args:
      args (List[str]): command line parameters as list of strings
          (for example  ``["--help"]``).

    Returns:
      :obj:`argparse.Namespace`: command line parameters namespace
    """
    cli = argparse.ArgumentParser(
        prog="sacfl",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    cli.add_argument(
        "-v",
        "--verbose",
        dest="loglevel",
        help="set loglevel to INFO",
        action="store_const",
        const=logging.INFO,
        default=logging.WARNING,
    )
    cli.add_argument(
        "-vv",
        "--very-verbose",
        dest="loglevel",
        help="set loglevel to DEBUG",
        action="store_const",
        const=logging.DEBUG,
    )
    commands = cli.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment file")
    common.add_argument("--seed", type=int, default=None, help="master seed override")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a configuration value, e.g. optimizer.learning_rate=0.1",
    )
    commands.add_parser("run", parents=[common], help="run one experiment")
    compare = commands.add_parser(
        "compare", parents=[common], help="compare methods on the same stream"
    )
    compare.add_argument(
        "--methods",
        nargs="+",
        default=["sacfl", "fedavg", "fedprox"],
        help=f"methods to run, any of {', '.join(METHODS)}",
    )
    commands.add_parser(
        "diagnose-layers", parents=[common], help="per-layer change across tasks"
    )
    return cli.parse_args(args)


def setup_logging(loglevel: int):
    """Setup basic logging

    Args:
      loglevel (int): minimum loglevel for emitting messages
    """
    logformat = "[%(asctime)s] %(levelname)s:%(name)s:%(message)s"
    logging.basicConfig(
        level=loglevel, stream=sys.stderr, format=logformat, datefmt="%Y-%m-%d %H:%M:%S"
    )


def main(args: Sequence[str]) -> int:
    """Wrapper allowing the commands to be called with string arguments"""
    opts = parse_args(args)
    setup_logging(opts.loglevel)
    if opts.command == "run":
        return cmd_run(opts.config, opts.overrides, opts.out, opts.seed)
    if opts.command == "compare":
        return cmd_compare(
            opts.config, opts.methods, opts.overrides, opts.out, opts.seed
        )
    return cmd_diagnose_layers(opts.config, opts.overrides, opts.out, opts.seed)


def run():
    """Entry point for the ``sacfl`` console script"""
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    run()
