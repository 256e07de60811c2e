"""Command-line front end.

Usage::

    fedsir run CONFIG [--seed N] [--out DIR] [--override section.key=value ...] [--similarity]
    fedsir sweep MANIFEST [--out DIR] [--override ...]
    fedsir report DIR [--metric final_accuracy]

Relative output directories are resolved against ``$FEDSIR_OUT_ROOT`` when it
is set, otherwise against the working directory. Exit status is 0 on success,
1 for configuration or input errors and 2 when a run fails.

A sweep manifest is a config file with an extra ``[sweep]`` section::

    [sweep]
    methods = fedsir, fedavg
    noise_rates = 0.6, 0.8
    dirichlet_alphas = 0.5
    seeds = 0, 1, 2
    out_dir = sweeps/demo
    workers = 1

The remaining sections form the base config shared by every grid point.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from fedsir import artifacts
from fedsir.config import ConfigError, apply_overrides, emit_config, from_mapping, parse_config
from fedsir.orchestrator import METHODS, ExperimentConfig, run_experiment

log = logging.getLogger("fedsir")

OUT_ROOT_ENV = "FEDSIR_OUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2


def resolve_out(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def run_name(cfg: ExperimentConfig) -> str:
    return f"{cfg.method}_rho{cfg.data.noise_rate!r}_alpha{cfg.data.dirichlet_concentration!r}_seed{cfg.seed}"


# ---------------------------------------------------------------- sweep manifest


@dataclass
class RunRecord:
    method: str
    noise_rate: float
    dirichlet_concentration: float
    seed: int
    path: str
    status: str = "pending"
    error: str = ""


@dataclass
class RunManifest:
    config: str  # effective base config, INI text
    seeds: list[int]
    out_dir: str
    methods: list[str]
    noise_rates: list[float]
    dirichlet_alphas: list[float]
    workers: int = 1
    runs: list[RunRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("sweep.seeds", "at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("sweep.seeds", "seeds must be distinct")
        for name in ("methods", "noise_rates", "dirichlet_alphas"):
            values = getattr(self, name)
            if not values:
                raise ConfigError(f"sweep.{name}", "at least one value required")
            if len(set(values)) != len(values):
                raise ConfigError(f"sweep.{name}", "values must be distinct")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("sweep.methods", f"unknown method {m!r}")
        if self.workers < 1:
            raise ConfigError("sweep.workers", "must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _split(text: str, kind, path: str) -> list:
    try:
        return [kind(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


def load_manifest(path: str | Path, overrides: Sequence[str] = (), out: str | None = None) -> tuple[RunManifest, ExperimentConfig]:
    """Parse a sweep manifest into the grid description and the base config."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc.strerror or exc}") from None
    except configparser.Error as exc:
        raise ConfigError(str(path), f"malformed file: {exc}") from None
    if not parser.has_section("sweep"):
        raise ConfigError("sweep", "manifest needs a [sweep] section")
    sweep = dict(parser["sweep"])
    known = {"methods", "noise_rates", "dirichlet_alphas", "seeds", "out_dir", "workers"}
    for key in sweep:
        if key not in known:
            raise ConfigError(f"sweep.{key}", "unknown key")
    base = from_mapping({s: dict(parser[s]) for s in parser.sections() if s != "sweep"})
    base = apply_overrides(base, list(overrides))
    try:
        workers = int(sweep.get("workers", "1"))
    except ValueError as exc:
        raise ConfigError("sweep.workers", str(exc)) from None
    manifest = RunManifest(
        config=emit_config(base),
        seeds=_split(sweep.get("seeds", str(base.seed)), int, "sweep.seeds"),
        out_dir=str(resolve_out(out or sweep.get("out_dir", "sweep"))),
        methods=_split(sweep.get("methods", base.method), str, "sweep.methods"),
        noise_rates=_split(sweep.get("noise_rates", repr(base.data.noise_rate)), float, "sweep.noise_rates"),
        dirichlet_alphas=_split(
            sweep.get("dirichlet_alphas", repr(base.data.dirichlet_concentration)), float, "sweep.dirichlet_alphas"
        ),
        workers=workers,
    )
    return manifest, base


def grid(manifest: RunManifest, base: ExperimentConfig) -> list[ExperimentConfig]:
    """Every ``(method, rho, alpha, seed)`` config, validated before anything runs."""
    configs = []
    for method in manifest.methods:
        for rho in manifest.noise_rates:
            for alpha in manifest.dirichlet_alphas:
                for seed in manifest.seeds:
                    overrides = [
                        f"method={method}",
                        f"seed={seed}",
                        f"data.noise_rate={rho!r}",
                        f"data.dirichlet_concentration={alpha!r}",
                    ]
                    configs.append(apply_overrides(base, overrides))
    return configs


def _execute(cfg: ExperimentConfig, out_dir: str, similarity: bool = False) -> str:
    result = run_experiment(cfg)
    artifacts.write_run(result, out_dir, similarity)
    return out_dir


def run_sweep(manifest: RunManifest, base: ExperimentConfig) -> int:
    """Run the grid, recording per-run status in ``manifest.json``; returns an exit status."""
    out = Path(manifest.out_dir)
    configs = grid(manifest, base)
    manifest.runs = [
        RunRecord(c.method, c.data.noise_rate, c.data.dirichlet_concentration, c.seed, str(out / run_name(c)))
        for c in configs
    ]
    artifacts.atomic_write_text(out / "manifest.json", manifest.to_json())

    def finish(record: RunRecord, error: BaseException | None) -> None:
        record.status = "failed" if error else "ok"
        record.error = f"{type(error).__name__}: {error}" if error else ""
        if error:
            log.error("run %s failed: %s", record.path, record.error)
        else:
            log.info("run %s done", record.path)
        artifacts.atomic_write_text(out / "manifest.json", manifest.to_json())

    if manifest.workers == 1:
        for cfg, record in zip(configs, manifest.runs):
            try:
                _execute(cfg, record.path)
            except Exception as exc:  # one bad grid point must not stop the sweep
                finish(record, exc)
            else:
                finish(record, None)
    else:
        with ProcessPoolExecutor(max_workers=manifest.workers) as pool:
            futures = [pool.submit(_execute, cfg, rec.path) for cfg, rec in zip(configs, manifest.runs)]
            for fut, record in zip(futures, manifest.runs):
                finish(record, fut.exception())
    failed = sum(r.status != "ok" for r in manifest.runs)
    print(f"sweep: {len(manifest.runs) - failed}/{len(manifest.runs)} runs ok -> {out}")
    return EXIT_RUN if failed else EXIT_OK


# ---------------------------------------------------------------- verbs


def cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = apply_overrides(cfg, overrides)
    out = resolve_out(args.out or Path("runs") / run_name(cfg))
    try:
        _execute(cfg, str(out), args.similarity)
    except Exception as exc:
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return EXIT_RUN
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    print(f"{run_name(cfg)}: final_accuracy={summary['final_accuracy']:.4f} -> {out}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    manifest, base = load_manifest(args.manifest, args.override, args.out)
    if args.seed is not None:
        manifest.seeds = [args.seed]
    return run_sweep(manifest, base)


def cmd_report(args: argparse.Namespace) -> int:
    root = resolve_out(args.dir)
    if not root.is_dir():
        raise ConfigError(str(root), "not a directory")
    summaries = artifacts.load_summaries(root)
    if not summaries:
        raise ConfigError(str(root), "no summary.json files found")
    table = artifacts.build_report(summaries, args.metric)
    text = table.render_text()
    artifacts.atomic_write_text(root / "report.txt", text)
    artifacts.atomic_write_text(root / "report.csv", table.render_csv())
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsir", description="Federated learning with noisy-label clients.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", help="output directory (relative paths resolve under $%s)" % OUT_ROOT_ENV)
        p.add_argument(
            "--override", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key"
        )

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("config")
    common(p_run)
    p_run.add_argument("--similarity", action="store_true", help="also dump per-client class-similarity CSVs")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a method x noise x alpha x seed grid")
    p_sweep.add_argument("manifest")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="tabulate summaries under a directory")
    p_report.add_argument("dir")
    p_report.add_argument("--metric", default="final_accuracy", help="summary field to tabulate")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
