"""``pitl simulate|train|transfer|report|benchmark``.

Exit codes: 0 success, 1 runtime failure (divergence, failed stage),
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .cells import Model
from .data import DataError, write_csv
from .training import PhysicsConfigError
from .transfer import CompositionError

logger = logging.getLogger("pitl")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class RunFailed(RuntimeError):
    pass


def _config(args) -> dict:
    cfg = ex.read_config(args.config) if args.config else ex.resolve_config({})
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out"] = args.out
    return cfg


def _out(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out, seed = _out(cfg), cfg["seed"]
    written = {
        "target.csv": ex.target_dataset(cfg, seed),
        "source_open.csv": ex.open_source_dataset(cfg, seed),
        "industrial.csv": ex.industrial_dataset(cfg, seed),
    }
    for fname, ds in written.items():
        write_csv(ds, out / fname)
        print(f"{out / fname}: {len(ds)} rows, {ds.n_features} features")
    return EXIT_OK


def _single_model(cfg: dict, want: str) -> dict:
    if "model" not in cfg:
        raise ex.ConfigError("config needs a 'model' entry (a preset name or an object with 'preset')")
    mc = ex.resolve_model(cfg["model"])
    if mc["type"] != want:
        raise ex.ConfigError(f"preset {mc['preset']!r} is a {mc['type']} model; use `pitl {'train' if mc['type'] == 'baseline' else 'transfer'}`")
    return mc


def _finish(res: ex.RunResult, manifest: dict, out: Path) -> int:
    ex.write_report(ex.build_report([manifest]), out)
    if res.status != "ok":
        raise RunFailed(f"{res.name} (seed {res.seed}): {res.diagnostic}")
    print(ex.report_text(ex.build_report([manifest])), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    mc = _single_model(cfg, "baseline")
    out, seed = _out(cfg), cfg["seed"]
    data = ex.target_data(cfg, seed)
    res = ex.run_baseline(mc, cfg, data, seed)
    return _finish(res, ex.write_run(out, res, cfg, data), out)


def cmd_transfer(args) -> int:
    cfg = _config(args)
    mc = _single_model(cfg, "transfer")
    out, seed = _out(cfg), cfg["seed"]
    data = ex.target_data(cfg, seed)
    if cfg.get("source_model"):
        path = Path(cfg["source_model"])
        if not path.is_file():
            raise ex.ConfigError(f"source model not found: {path}")
        source = Model.load(path)
        info = {"name": mc["source"], "path": str(path), "digest": source.param_digest()}
    else:
        pre = ex.pretrain(cfg, mc["source"], seed)
        source = pre.model
        info = ex.write_source(out / "source", mc["source"], pre)
    res = ex.run_transfer_model(mc, cfg, data, source, seed)
    return _finish(res, ex.write_run(out, res, cfg, data, info), out)


def cmd_report(args) -> int:
    manifests = ex.find_manifests(args.runs)
    rows = ex.build_report(manifests)
    if args.out:
        ex.write_report(rows, Path(args.out))
    print(ex.report_text(rows), end="")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    if args.seeds:
        cfg["seeds"] = args.seeds
    elif args.seed is not None:
        cfg["seeds"] = [args.seed]
    rows = ex.benchmark(cfg, cfg["seeds"], _out(cfg), args.threads)
    print(ex.report_text(rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pitl", description="Physics-informed transfer learning for dissolved-oxygen prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (overrides the config)")

    p = sub.add_parser("simulate", help="write the synthetic target, open-source and industrial CSVs")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("train", help="train one baseline model (standard, more_complex, less_complex)")
    common(p, config_required=True)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("transfer", help="run transfer Steps 1-4 for open_source_tl, industrial_tl or pitl")
    common(p, config_required=True)
    p.set_defaults(func=cmd_transfer)
    p = sub.add_parser("report", help="aggregate run manifests into a metrics table")
    p.add_argument("runs", nargs="*", help="run directories (searched recursively for manifest.json)")
    p.add_argument("--out", help="write report.csv and report.txt here")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("benchmark", help="all six models over several seeds")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="seed list (default: config seeds)")
    p.add_argument("--threads", type=int, help="parallel seeds (default: $PITL_THREADS or 1)")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigError, PhysicsConfigError, CompositionError, DataError, KeyError) as e:
        print(f"pitl {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ex.StageError, RunFailed) as e:
        print(f"pitl {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        print(f"pitl {args.command}: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
