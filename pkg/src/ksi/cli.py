"""``ksi`` command-line front end: fit, generate, eval, preset.

Exit codes: 0 success, 1 preset check failed, 2 usage or configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ksi import __version__
from ksi.diagnostics import MetricReport, density_histogram, leverage_effect, mmd2, moment_report
from ksi.errors import ConfigError, CorruptTableError, GenerationError, NumericalError
from ksi.features import build_feature_map
from ksi.fit import DataPairs, fit_table
from ksi.io import (
    RunConfig,
    config_hash,
    file_sha256,
    parse_config,
    read_csv_samples,
    read_table,
    validate_config,
    write_csv_samples,
    write_table,
)
from ksi.oracle import GaussianTarget
from ksi.presets import PRESETS
from ksi.sampler import Diffusion, GenConfig, TableDrift, generate
from ksi.schedules import SCHEDULE_IDS, Schedule
from ksi.synthetic import ar1_series, cascade_series, gaussian_mixture

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0xC1, tag))))


def _load_config(args) -> tuple[RunConfig, list]:
    cfg = parse_config(args.config)
    inputs = [args.config]
    if args.seed is not None:
        raw = copy.deepcopy(cfg.raw)
        raw["seed"] = args.seed
        cfg = validate_config(raw)
    return cfg, inputs


def _run_dir(cfg_hash: str) -> Path:
    return Path("runs") / cfg_hash[:16]


def _schedule_name(sid: int) -> str:
    return next((k for k, v in SCHEDULE_IDS.items() if v == sid), "custom")


def _csv_target(cfg: RunConfig) -> dict:
    return cfg.target if isinstance(cfg.target, dict) else {"path": cfg.target}


def target_data(cfg: RunConfig) -> tuple[np.ndarray, list]:
    """Training targets ``a`` (one row per pair) and the input files they came from.

    Series targets are a single realization repeated ``n_pairs`` times.
    """
    kind, spec, seed = cfg.target_kind, cfg.target, cfg.seed
    if kind == "csv":
        spec = _csv_target(cfg)
        try:
            data = read_csv_samples(spec["path"])
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc), "/target/csv") from exc
        if cfg.is_series:
            return np.tile(data.ravel(), (cfg.n_pairs, 1)), [spec["path"]]
        return data, [spec["path"]]
    if kind == "gaussian":
        target = GaussianTarget.from_spec(spec)
        return target.sample(cfg.n_pairs, _rng(seed, 1)), []
    if kind == "mixture":
        try:
            data = gaussian_mixture(cfg.n_pairs, spec["means"], spec["weights"], spec["std"], seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc), "/target/mixture") from exc
        return data, []
    if kind == "ar1":
        try:
            x = ar1_series(spec["length"], spec["phi"], spec.get("sigma", 1.0), seed=seed)
        except ValueError as exc:
            raise ConfigError(str(exc), "/target/ar1") from exc
        return np.tile(x, (cfg.n_pairs, 1)), []
    if kind == "cascade":
        x = cascade_series(
            spec["length"],
            scales=spec.get("scales", 6),
            vol_of_vol=spec.get("vol_of_vol", 0.2),
            leverage=spec.get("leverage", 0.2),
            seed=seed,
        )
        return np.tile(x, (cfg.n_pairs, 1)), []
    raise ConfigError(f"unknown target kind {kind!r}", "/target")


def _pairs(cfg: RunConfig) -> tuple[DataPairs, list]:
    a, inputs = target_data(cfg)
    if cfg.target_kind == "csv" and isinstance(cfg.target, dict) and "z_path" in cfg.target:
        try:
            z = read_csv_samples(cfg.target["z_path"], expected_dim=a.shape[1])
        except (OSError, ValueError) as exc:
            raise ConfigError(str(exc), "/target/csv/z_path") from exc
        if z.shape != a.shape:
            raise ConfigError(f"z has shape {z.shape}, data has {a.shape}", "/target/csv/z_path")
        return DataPairs(z, a), inputs + [cfg.target["z_path"]]
    return DataPairs.with_noise(a, cfg.seed), inputs


def _hashes(paths) -> dict:
    return {str(p): file_sha256(p) for p in paths}


def _write_manifest(path: Path, command: str, cfg: RunConfig, inputs, outputs, started: float, **extra):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "wall_time_s": round(time.perf_counter() - started, 3),
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def cmd_fit(args) -> int:
    started = time.perf_counter()
    cfg, inputs = _load_config(args)
    schedule = Schedule.from_name(cfg.schedule)
    pairs, data_inputs = _pairs(cfg)
    fmap = build_feature_map(cfg.features, pairs.d, schedule)
    table = fit_table(fmap, pairs, schedule, cfg.steps, ridge=cfg.ridge, threads=args.threads)
    if cfg.ridge == 0 and table.fallback_nodes:
        k = table.fallback_nodes[0]
        raise NumericalError(
            f"Gram matrix is rank deficient at node {k} with ridge 0 "
            f"({len(table.fallback_nodes)} node(s) affected)",
            t=float(table.grid[k]),
        )
    out = Path(args.out) if args.out else _run_dir(cfg.hash()) / "table.ksid"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(table, out)
    cond = table.conditions[np.isfinite(table.conditions)]
    if cond.size:
        print(
            f"condition numbers over {table.steps} nodes: "
            f"min {cond.min():.3g}  median {np.median(cond):.3g}  max {cond.max():.3g}"
        )
    if cond.size < table.steps:
        print(f"{table.steps - cond.size} node(s) with singular Gram matrix")
    if table.fallback_nodes:
        print(f"pseudo-inverse fallback at nodes: {list(table.fallback_nodes)}")
    _write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "fit",
        cfg,
        inputs + data_inputs,
        [out],
        started,
        table_sha256=file_sha256(out),
        n_pairs=pairs.n,
    )
    print(f"wrote {out} (K={table.steps}, P={table.num_features}, d={table.dim})")
    return EXIT_OK


def cmd_generate(args) -> int:
    started = time.perf_counter()
    cfg, inputs = _load_config(args)
    run = _run_dir(cfg.hash())
    table_path = Path(args.table) if args.table else run / "table.ksid"
    table = read_table(table_path)
    expected = SCHEDULE_IDS[cfg.schedule]
    if table.schedule_id != expected:
        raise ConfigError(
            f"table schedule id {table.schedule_id} ({_schedule_name(table.schedule_id)}) does not match config schedule id {expected} ({cfg.schedule})",
            "/schedule",
        )
    schedule = Schedule.from_name(cfg.schedule)
    fmap = build_feature_map(table.feature_map, table.dim, schedule)
    gen = cfg.generate
    diffusion = Diffusion.from_spec(gen.diffusion)
    steps = gen.steps if gen.steps is not None else table.steps
    gcfg = GenConfig(steps, gen.num_samples, cfg.seed, cfg.schedule, diffusion)
    batch = generate(TableDrift(table, fmap), schedule, gcfg, threads=args.threads)
    out = Path(args.out) if args.out else run / "samples.csv"
    write_csv_samples(batch.states, out)
    _write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "generate",
        cfg,
        inputs + [table_path],
        [out],
        started,
        table_sha256=file_sha256(table_path),
        diffusion=diffusion.to_spec(),
        steps=steps,
        num_samples=gen.num_samples,
    )
    print(f"wrote {batch.states.shape[0]} samples ({diffusion} diffusion, {steps} steps) to {out}")
    return EXIT_OK


def _subsample(x: np.ndarray, n: int, rng) -> np.ndarray:
    if x.shape[0] <= n:
        return x
    return x[np.sort(rng.choice(x.shape[0], size=n, replace=False))]


def cmd_eval(args) -> int:
    started = time.perf_counter()
    cfg, inputs = _load_config(args)
    if not cfg.metrics:
        raise ConfigError("metrics list is empty; choose from mmd, moments, leverage, density", "/metrics")
    run = _run_dir(cfg.hash())
    samples_path = Path(args.samples) if args.samples else run / "samples.csv"
    try:
        X = read_csv_samples(samples_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc), "") from exc
    series = cfg.is_series or X.shape[1] == 1
    if "leverage" in cfg.metrics and not series:
        raise ConfigError(
            f"leverage needs time-series data (a series target, or one column); samples have d={X.shape[1]} "
            "and the target is not flagged as a series",
            "/metrics",
        )
    inputs = inputs + [samples_path]
    if cfg.target_kind == "gaussian":
        target = GaussianTarget.from_spec(cfg.target)
        ref_moments = target
        ref = target.sample(max(cfg.mmd_max_samples, 2), _rng(cfg.seed, 2))
    else:
        data, data_inputs = target_data(cfg)
        inputs += data_inputs
        ref = data[:1] if cfg.is_series else data
        ref_moments = ref
    if ref.shape[1] != X.shape[1]:
        raise ConfigError(f"samples have d={X.shape[1]}, reference has d={ref.shape[1]}", "/target")

    report = MetricReport(metadata={"samples": str(samples_path), "num_samples": X.shape[0], "dim": X.shape[1]})
    out_dir = Path(args.out).parent if args.out else run
    extra_files = []
    rng = _rng(cfg.seed, 3)
    if "moments" in cfg.metrics:
        if series:
            # one-point moments of the pooled values
            pooled_ref = ref_moments if isinstance(ref_moments, GaussianTarget) else ref.reshape(-1, 1)
            rep = moment_report(X.reshape(-1, 1), pooled_ref)
        else:
            rep = moment_report(X, ref_moments)
        report.metrics.update(rep.metrics)
    if "mmd" in cfg.metrics:
        n = cfg.mmd_max_samples
        if series:
            a = rng.choice(X.ravel(), size=min(n, X.size), replace=False)[:, None]
            b = rng.choice(ref.ravel(), size=min(n, ref.size), replace=False)[:, None]
        else:
            a, b = _subsample(X, n, rng), _subsample(ref, n, rng)
        est, se = mmd2(a, b, cfg.mmd_bandwidth)
        report.add("mmd2", est, se)
    if "leverage" in cfg.metrics:
        paths = X.T if X.shape[1] == 1 else X
        levs = [leverage_effect(p, cfg.max_lag) for p in paths]
        ref_lev = leverage_effect(ref.ravel() if X.shape[1] == 1 else ref[0], cfg.max_lag)
        lags = sorted(ref_lev)
        rows = []
        for lag in lags:
            vals = np.array([lv[lag] for lv in levs])
            se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            report.add(f"leverage[{lag}]", float(vals.mean()), se, ref_lev[lag])
            rows.append([lag, ref_lev[lag], vals.mean()])
        write_csv_samples(np.array(rows), out_dir / "leverage.csv", header=["lag", "reference", "generated"])
        extra_files.append(out_dir / "leverage.csv")
    if "density" in cfg.metrics:
        lim = float(max(np.abs(X).max(), np.abs(ref).max()))
        centers, dens = density_histogram(X, bins=80, value_range=(-lim, lim))
        _, ref_dens = density_histogram(ref, bins=80, value_range=(-lim, lim))
        write_csv_samples(np.column_stack([centers, ref_dens, dens]), out_dir / "density.csv", header=["x", "reference", "generated"])
        extra_files.append(out_dir / "density.csv")

    text = report.to_json()
    print(text)
    out = Path(args.out) if args.out else run / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n", encoding="utf-8")
    _write_manifest(
        out.with_name(out.name + ".manifest.json"), "eval", cfg, inputs, [out] + extra_files, started, metrics=cfg.metrics
    )
    return EXIT_OK


def cmd_preset(args) -> int:
    started = time.perf_counter()
    name = args.name
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}", "")
    seed = 0 if args.seed is None else args.seed
    spec = {"preset": name, "seed": seed}
    out = Path(args.out) if args.out else Path("runs") / config_hash(spec)[:16]
    result = PRESETS[name](out, seed=seed, threads=args.threads)
    for c in result.checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    files = [out / f for f in result.files]
    manifest = {
        "command": "preset",
        "preset": name,
        "version": __version__,
        "seed": seed,
        "config_hash": config_hash(spec),
        "inputs": {},
        "outputs": _hashes(files),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "passed": result.ok,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{name}: {'all checks passed' if result.ok else 'some checks FAILED'}; outputs in {out}")
    return EXIT_OK if result.ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ksi", description="Drift-table generative modelling with stochastic interpolants.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output path (default: under runs/<config hash>/)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")

    common(sub.add_parser("fit", help="fit the drift table"))
    p = sub.add_parser("generate", help="generate samples from a drift table")
    common(p)
    p.add_argument("--table", help="drift table file (default: runs/<config hash>/table.ksid)")
    p = sub.add_parser("eval", help="evaluate samples against the configured target")
    common(p)
    p.add_argument("--samples", help="samples CSV (default: runs/<config hash>/samples.csv)")
    p = sub.add_parser("preset", help=f"run a built-in experiment ({', '.join(PRESETS)})")
    p.add_argument("name")
    common(p, config=False)
    return parser


COMMANDS = {"fit": cmd_fit, "generate": cmd_generate, "eval": cmd_eval, "preset": cmd_preset}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CorruptTableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
