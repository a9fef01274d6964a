"""Command-line entry points: ``heatchange simulate | estimate | experiment``.

Every command writes its artifacts into ``--out`` and finishes with a
``manifest.json`` that lists each file with its SHA-256 hash. Exit codes are
0 on success, 2 for configuration errors and 3 for data or IO errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import metadata as importlib_metadata
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from . import experiments
from .estimators import CandidateFamily, ThetaPrior, estimate_constrained, estimate_tiling
from .geometry import TileGrid, boundary_tiles, domain_from_dict
from .kernel import Kernel
from .spde_sim import SCHEMES, DiffusivitySpec, LocalStats, assemble_operator, measurement_model

log = logging.getLogger("heatchange")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
STATS_COLUMNS = ("replicate", "alpha_flat", "U", "I")
FAMILIES = ("power-set", "model-a", "model-b")


class ConfigError(Exception):
    """Invalid configuration or flags (exit code 2)."""


class DataError(Exception):
    """Malformed input data or failed IO (exit code 3)."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_PRIOR = {
    "type": "object",
    "required": ["minus", "plus"],
    "properties": {"minus": _PAIR, "plus": _PAIR, "eta_min": {"type": ["number", "null"]}},
    "additionalProperties": False,
}
_TRUTH = {"type": "object", "required": ["kind"], "properties": {"kind": {"enum": ["graph", "ball", "box", "polytope", "tiling"]}}}

SIMULATE_SCHEMA = {
    "type": "object",
    "required": ["n", "fine_cells", "steps", "horizon", "theta", "truth", "replicates", "seed"],
    "properties": {
        "d": {"type": "integer", "minimum": 1},
        "n": {"type": "integer", "minimum": 1},
        "fine_cells": {"type": "integer", "minimum": 2},
        "steps": {"type": "integer", "minimum": 1},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "theta": {**_PAIR, "items": {"type": "number", "exclusiveMinimum": 0}},
        "truth": _TRUTH,
        "replicates": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "n_modes": {"type": ["integer", "null"], "minimum": 1},
        "mode_capture": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "scheme": {"enum": list(SCHEMES)},
        "laplacian": {"enum": ["discrete", "analytic"]},
        "average": {"enum": ["harmonic", "arithmetic"]},
        "prior": _PRIOR,
        "family": {"enum": list(FAMILIES)},
    },
    "additionalProperties": False,
}

ESTIMATE_SCHEMA = {
    "type": "object",
    "properties": {"prior": _PRIOR, "family": {"enum": list(FAMILIES)}, "lattice": {"type": "integer", "minimum": 2}},
    "additionalProperties": False,
}


def _schema_message(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path)
    return f"{where}: {err.message}" if where else err.message


def validate(data: object, schema: dict, what: str) -> None:
    """Raise :class:`ConfigError` with the first schema violation (missing fields are named)."""
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError(f"invalid {what} config: {_schema_message(errors[0])}")


def load_json(path: str | Path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} config {path} is not valid JSON (line {exc.lineno}): {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{what} config must be a JSON object")
    return data


# ---------------------------------------------------------------------------
# Stats CSV
# ---------------------------------------------------------------------------


def write_stats(path: Path, stats: Sequence[LocalStats]) -> None:
    """One row per replicate and tile. Floats use ``repr`` so they parse back bit-identically."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_COLUMNS)
        for s in stats:
            for a in range(s.grid.N):
                w.writerow((s.replicate, a, repr(float(s.U[a])), repr(float(s.I[a]))))


def read_stats(path: str | Path, grid: TileGrid | None = None, d: int = 2) -> list[LocalStats]:
    """Parse a stats CSV. Every problem is reported with its line number as a :class:`DataError`."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read stats file {path}: {exc.strerror}") from exc
    by_rep: dict[int, dict[int, tuple[float, float]]] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != STATS_COLUMNS:
            raise DataError(f"{path} line 1: expected header {','.join(STATS_COLUMNS)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path} line {line}: expected 4 fields, got {len(row)}")
            try:
                rep, alpha = int(row[0]), int(row[1])
                U, I = float(row[2]), float(row[3])
            except ValueError as exc:
                raise DataError(f"{path} line {line}: {exc}") from exc
            if not (np.isfinite(U) and np.isfinite(I)) or I < 0:
                raise DataError(f"{path} line {line}: U must be finite and I finite and non-negative")
            tiles = by_rep.setdefault(rep, {})
            if alpha in tiles:
                raise DataError(f"{path} line {line}: duplicate tile {alpha} for replicate {rep}")
            if alpha < 0 or (grid is not None and alpha >= grid.N):
                raise DataError(f"{path} line {line}: tile index {alpha} out of range")
            tiles[alpha] = (U, I)
    if not by_rep:
        raise DataError(f"{path}: no data rows")
    if grid is None:
        N = len(next(iter(by_rep.values())))
        n = round(N ** (1.0 / d))
        if n**d != N:
            raise DataError(f"{path}: {N} tiles is not a d={d} grid")
        grid = TileGrid(d, n)
    out = []
    for rep in sorted(by_rep):
        tiles = by_rep[rep]
        if sorted(tiles) != list(range(grid.N)):
            raise DataError(f"{path}: replicate {rep} has {len(tiles)} of {grid.N} tiles")
        U = np.array([tiles[a][0] for a in range(grid.N)])
        I = np.array([tiles[a][1] for a in range(grid.N)])
        out.append(LocalStats(grid, U, I, replicate=rep, scheme="file"))
    return out


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def write_rows(path: Path, rows: list[dict]) -> None:
    columns: list[str] = []
    for r in rows:
        columns += [k for k in r if k not in columns]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def code_version() -> str:
    try:
        return importlib_metadata.version("artifact")
    except importlib_metadata.PackageNotFoundError:
        return "unknown"


def write_manifest(out: Path, command: str, config: dict, files: Sequence[Path], elapsed: float,
                   kernel: Kernel | None = None) -> Path:
    """Record the run and hash every output file. Call this last."""
    manifest = {
        "command": command,
        "code_version": code_version(),
        "config": config,
        "kernel_norms": None if kernel is None else kernel.norms(),
        "timing": {"elapsed_seconds": elapsed},
        "files": [{"name": p.name, "sha256": sha256(p), "bytes": p.stat().st_size} for p in files],
    }
    path = out / "manifest.json"
    write_json(path, manifest)
    return path


def verify_manifest(out: str | Path) -> list[str]:
    """Names of files whose current hash differs from the manifest (empty when all verify)."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    bad = []
    for entry in manifest["files"]:
        p = out / entry["name"]
        if not p.exists() or sha256(p) != entry["sha256"]:
            bad.append(entry["name"])
    return bad


def _outdir(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _family(kind: str, grid: TileGrid) -> CandidateFamily:
    try:
        return CandidateFamily(kind, grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_simulate(config_path: str | Path, out: str | Path, seed_override: int | None = None,
                 threads: int = 1) -> list[Path]:
    """Simulate replicates of one configuration and write stats, metadata and manifest."""
    start = time.perf_counter()
    cfg = load_json(config_path, "simulate")
    validate(cfg, SIMULATE_SCHEMA, "simulate")
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    d = int(cfg.get("d", 2))
    grid = TileGrid(d, int(cfg["n"]))
    M = int(cfg["fine_cells"])
    try:
        spec = DiffusivitySpec(float(cfg["theta"][0]), float(cfg["theta"][1]), domain_from_dict(cfg["truth"]))
        op = assemble_operator(spec, M, grid, average=cfg.get("average", "harmonic"))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid simulate config: {exc}") from exc
    kernel = Kernel(d)
    model = measurement_model(op, kernel, grid, n_modes=cfg.get("n_modes"), mode_capture=cfg.get("mode_capture"),
                              laplacian_mode=cfg.get("laplacian", "discrete"))
    stats = model.run_many(float(cfg["horizon"]), int(cfg["steps"]), int(cfg["seed"]), int(cfg["replicates"]),
                           cfg.get("scheme", "decomposed"), threads)
    out = _outdir(out)
    files = [out / "stats.csv", out / "metadata.json"]
    meta = {
        "config": cfg,
        "grid": grid.to_dict(),
        "fine_cells": M,
        "modes": model.basis.n_modes,
        "truth_tiles": spec.truth_tiles(grid).to_string(),
        "boundary_tiles": boundary_tiles(spec.domain, grid).tolist(),
        "columns": list(STATS_COLUMNS),
    }
    try:
        write_stats(files[0], stats)
        write_json(files[1], meta)
        files.append(write_manifest(out, "simulate", cfg, files, time.perf_counter() - start, kernel))
    except OSError as exc:
        raise DataError(f"cannot write outputs: {exc}") from exc
    return files


def _prior_from(args_minus, args_plus, *sources) -> ThetaPrior:
    if args_minus is not None and args_plus is not None:
        return ThetaPrior(tuple(args_minus), tuple(args_plus))
    for src in sources:
        if src and src.get("prior"):
            p = src["prior"]
            return ThetaPrior(tuple(p["minus"]), tuple(p["plus"]), p.get("eta_min"))
    raise ConfigError("no prior given: pass --prior-minus and --prior-plus or put 'prior' in the config")


def cmd_estimate(stats_path: str | Path, out: str | Path, family: str | None = None,
                 prior_minus: Sequence[float] | None = None, prior_plus: Sequence[float] | None = None,
                 metadata_path: str | Path | None = None, config_path: str | Path | None = None,
                 d: int = 2) -> list[Path]:
    """Estimate every replicate in a stats CSV; add the tiling estimate when the truth is grid-anchored."""
    start = time.perf_counter()
    cfg = {}
    if config_path is not None:
        cfg = load_json(config_path, "estimate")
        validate(cfg, ESTIMATE_SCHEMA, "estimate")
    meta_file = Path(metadata_path) if metadata_path else Path(stats_path).with_name("metadata.json")
    meta = None
    if meta_file.exists():
        try:
            meta = json.loads(meta_file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read metadata {meta_file}: {exc}") from exc
    elif metadata_path:
        raise DataError(f"metadata file {meta_file} does not exist")
    grid = TileGrid.from_dict(meta["grid"]) if meta else None
    kind = family or cfg.get("family") or (meta or {}).get("config", {}).get("family")
    if kind is None:
        raise ConfigError("no family given: pass --family or put 'family' in the config")
    if kind not in FAMILIES:
        raise ConfigError(f"unknown family {kind!r}; expected one of {FAMILIES}")
    prior = _prior_from(prior_minus, prior_plus, cfg, (meta or {}).get("config"))
    stats = read_stats(stats_path, grid, d)
    grid = stats[0].grid
    fam = _family(kind, grid)

    truth = spec = None
    anchored = False
    if meta and "truth" in meta.get("config", {}):
        c = meta["config"]
        spec = DiffusivitySpec(float(c["theta"][0]), float(c["theta"][1]), domain_from_dict(c["truth"]))
        truth = spec.truth_tiles(grid)
        anchored = boundary_tiles(spec.domain, grid).size == 0
    results = []
    for s in stats:
        est = estimate_constrained(s, prior, fam, lattice=int(cfg.get("lattice", 33)))
        rec = {"replicate": s.replicate, "constrained": est.to_dict(), "tiling": None}
        if anchored:
            tiling = estimate_tiling(s, fam, est)
            rec["tiling"] = tiling.to_dict()
            rec["star_equals_truth"] = tiling.star_lambda_plus == truth
        if truth is not None:
            rec["constrained_equals_truth_tiles"] = est.lambda_plus == truth
        results.append(rec)
    out = _outdir(out)
    files = [out / "estimate.json"]
    payload = {"family": kind, "prior": prior.to_dict(), "grid": grid.to_dict(),
               "grid_anchored_truth": anchored, "results": results}
    echo = {"stats": str(stats_path), "family": kind, "prior": prior.to_dict(), **cfg}
    try:
        write_json(files[0], payload)
        files.append(write_manifest(out, "estimate", echo, files, time.perf_counter() - start, Kernel(grid.d)))
    except OSError as exc:
        raise DataError(f"cannot write outputs: {exc}") from exc
    return files


def _summary_lines(summary: dict, prefix: str = "") -> list[str]:
    lines = []
    for key, value in summary.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            lines += _summary_lines(value, name + ".")
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            for i, item in enumerate(value):
                lines += _summary_lines(item, f"{name}[{i}].")
        else:
            lines.append(f"{name:<48} {value}")
    return lines


def cmd_experiment(scenario: str | None, out: str | Path, config_path: str | Path | None = None,
                   seed_override: int | None = None, threads: int | None = None,
                   stream=None) -> list[Path]:
    """Run a scenario (preset values overridden by the config file) and write rows, summary and manifest."""
    start = time.perf_counter()
    data = load_json(config_path, "experiment") if config_path else {}
    scenario = scenario or data.get("scenario")
    if scenario not in experiments.SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; expected one of {', '.join(experiments.SCENARIOS)}")
    if data.get("scenario", scenario) != scenario:
        raise ConfigError(f"--scenario {scenario} conflicts with config scenario {data['scenario']}")
    merged = {**experiments.PRESETS[scenario], **data, "scenario": scenario}
    if seed_override is not None:
        merged["seed"] = int(seed_override)
    if threads is not None:
        merged["threads"] = int(threads)
    try:
        config = experiments.ExperimentConfig.from_dict(merged)
        if scenario.startswith("rate-") and len(config.grid_sizes) < 3:
            raise ValueError(f"{scenario} needs at least 3 grid sizes, got {len(config.grid_sizes)}")
        report = experiments.run(config)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc
    out = _outdir(out)
    stem = f"{scenario}_seed{config.seed}"
    files = [out / f"{stem}.csv", out / f"{stem}_summary.json"]
    try:
        write_rows(files[0], report.rows)
        write_json(files[1], {"scenario": scenario, "config": config.to_dict(), "summary": report.summary})
        files.append(write_manifest(out, "experiment", config.to_dict(), files, time.perf_counter() - start,
                                    Kernel(config.d)))
    except OSError as exc:
        raise DataError(f"cannot write outputs: {exc}") from exc
    stream = sys.stdout if stream is None else stream
    print(f"scenario {scenario} ({report.elapsed:.1f} s)", file=stream)
    for line in _summary_lines(report.summary):
        print("  " + line, file=stream)
    return files


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatchange", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate replicates and write per-tile statistics")
    p.add_argument("--config", required=True, help="JSON simulation config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed-override", type=int, help="replace the config seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for replicates")

    p = sub.add_parser("estimate", help="estimate the change domain from a stats CSV")
    p.add_argument("--stats", required=True, help="stats CSV written by 'simulate'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON with prior, family and lattice")
    p.add_argument("--metadata", help="metadata JSON (default: metadata.json next to the stats)")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--prior-minus", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--prior-plus", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--d", type=int, default=2, help="dimension when no metadata is available")

    p = sub.add_parser("experiment", help="run a Monte Carlo scenario")
    p.add_argument("--scenario", help=f"one of {', '.join(experiments.SCENARIOS)}")
    p.add_argument("--config", help="JSON overriding the scenario preset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed-override", type=int)
    p.add_argument("--threads", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            files = cmd_simulate(args.config, args.out, args.seed_override, args.threads)
        elif args.command == "estimate":
            if (args.prior_minus is None) != (args.prior_plus is None):
                raise ConfigError("--prior-minus and --prior-plus must be given together")
            files = cmd_estimate(args.stats, args.out, args.family, args.prior_minus, args.prior_plus,
                                 args.metadata, args.config, args.d)
        else:
            files = cmd_experiment(args.scenario, args.out, args.config, args.seed_override, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
