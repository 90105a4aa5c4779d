"""Command-line entry point: ``myopic-lab <command> [options]``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures (including a blow-up fraction above 0.1%).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from ..exceptions import ConfigurationError, NumericalDomainError
from .config import ScenarioConfig, canonical_yaml, config_hash, load_config
from .experiments import RUNNERS, ExperimentResult, run_experiment

__all__ = ["main", "build_parser", "write_csv", "BLOW_UP_LIMIT"]

log = logging.getLogger("myopic_lab")

BLOW_UP_LIMIT = 1e-3
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
COMMANDS = tuple(RUNNERS) + ("report",)


def _version() -> str:
    from .. import __version__

    return __version__


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="myopic-lab", description="Myopic-optimal trading laboratory.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML scenario file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--paths", type=int, help="override experiment.n_paths")
        p.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
    return parser


def _resolve(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config is not None else ScenarioConfig().validate()
    exp = cfg.experiment
    if args.seed is not None:
        exp = replace(exp, seed=args.seed)
    if args.paths is not None:
        exp = replace(exp, n_paths=args.paths)
    exp = replace(exp, kind=args.command)
    cfg = replace(cfg, experiment=exp)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    if args.threads < 1:
        raise ConfigurationError("--threads must be >= 1")
    return cfg.validate()


def _write_outputs(out: Path, command: str, cfg: ScenarioConfig, result: ExperimentResult, wall: float) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name, table in result.tables.items():
        path = out / name
        write_csv(path, table.columns, table.rows)
        outputs.append({"file": name, "columns": table.columns, "rows": len(table.rows), "sha256": _sha256(path)})
    summary_name = f"{command}.json"
    (out / summary_name).write_text(json.dumps(_jsonable(result.summary), indent=2, sort_keys=True) + "\n")
    outputs.append({"file": summary_name, "columns": [], "rows": 0, "sha256": _sha256(out / summary_name)})
    (out / "config.yaml").write_text(canonical_yaml(cfg))
    total = max(result.n_paths, result.blow_ups)
    manifest = {
        "command": command,
        "version": _version(),
        "config_hash": config_hash(cfg),
        "seed": int(cfg.experiment.seed),
        "n_paths": int(cfg.experiment.n_paths),
        "outputs": outputs,
        "n_blown_up": int(result.blow_ups),
        "blow_up_fraction": result.blow_ups / total if total else 0.0,
        "wall_clock_seconds": wall,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return manifest


def _report(out: Path) -> dict:
    """Verify the checksums listed in an existing manifest and tabulate them."""
    mpath = out / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {out}")
    manifest = json.loads(mpath.read_text())
    rows = []
    for entry in manifest.get("outputs", []):
        f = out / entry["file"]
        actual = _sha256(f) if f.is_file() else ""
        rows.append([entry["file"], entry["rows"], entry["sha256"], actual, int(actual == entry["sha256"])])
    write_csv(out / "report.csv", ["file", "rows", "expected_sha256", "actual_sha256", "ok"], rows)
    return {"command": manifest.get("command"), "config_hash": manifest.get("config_hash"),
            "all_ok": all(r[4] for r in rows), "n_files": len(rows)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            out = args.out if args.out is not None else Path(_resolve(args).output_dir)
            info = _report(out)
            print(json.dumps(info, sort_keys=True))
            return EXIT_OK if info["all_ok"] else EXIT_NUMERIC
        cfg = _resolve(args)
        log.info("running %s (seed=%d, n_paths=%d)", args.command, cfg.experiment.seed, cfg.experiment.n_paths)
        t0 = time.perf_counter()
        result = run_experiment(args.command, cfg, cfg.experiment.seed, cfg.experiment.n_paths, args.threads)
        manifest = _write_outputs(Path(cfg.output_dir), args.command, cfg, result, time.perf_counter() - t0)
    except (ConfigurationError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalDomainError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if manifest["blow_up_fraction"] > BLOW_UP_LIMIT:
        print(f"numerical error: blow-up fraction {manifest['blow_up_fraction']:.4g} exceeds "
              f"{BLOW_UP_LIMIT:g}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"command": args.command, "out": cfg.output_dir, "config_hash": manifest["config_hash"]}))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
