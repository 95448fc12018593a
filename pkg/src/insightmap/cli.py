"""Command-line entry point: build-map, run, eval, meta, inspect.

Exit codes: 0 success, 1 usage or configuration error, 2 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import map_model
from .backends import BackendError, FormatError
from .citations import CitationDB
from .evaluation.suite import EvalConfig
from .map_builder import BuildError
from .meta import MetaConfig
from .pipeline import (ConfigError, RunConfig, Workspace, WorkspaceBusy, cmd_build_map, cmd_eval, cmd_meta,
                       cmd_run, expand_reports, inspect_map, make_backends, read_history,
                       write_json)

logger = logging.getLogger("insightmap")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="insightmap", description="Autonomous insight discovery over an exploration map.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="run config JSON")
        sp.add_argument("--workspace", default="workspace", help="workspace directory")
        sp.add_argument("--mock-script", help="JSON mock script; replaces every external backend")

    common(sub.add_parser("build-map", help="construct the exploration map"))
    run = sub.add_parser("run", help="run N discovery loops")
    common(run)
    run.add_argument("--n", type=int, default=1, help="number of loops")
    run.add_argument("--seed", type=int, default=0, help="seed for the web-expansion coin")

    ev = sub.add_parser("eval", help="score report JSON files (reports are never modified)")
    common(ev, config_required=False)
    ev.add_argument("reports", nargs="*", help="report JSON paths or globs (default: workspace reports)")
    ev.add_argument("--citations", help="citation database (default: workspace citations.jsonl)")
    ev.add_argument("--metrics", default="all", help="'all' or 'ng' (numeric grounding only, no backend)")
    ev.add_argument("--history", help="exploration trace (.jsonl) or narrative text for every report")
    ev.add_argument("--out", help="write scores here instead of the workspace evals/ directory")

    meta = sub.add_parser("meta", help="synthesise meta-reports across reports")
    common(meta)
    meta.add_argument("reports", nargs="*", help="report JSON paths or globs (default: workspace reports)")
    meta.add_argument("--k", type=int, help="maximum number of clusters")

    ins = sub.add_parser("inspect", help="print the map as a tree with scores")
    ins.add_argument("map", nargs="?", help="map JSON (default: <workspace>/map.json)")
    ins.add_argument("--workspace", default="workspace")
    return p


def _config(args) -> Optional[RunConfig]:
    return RunConfig.load(args.config) if getattr(args, "config", None) else None


def _backends(args, cfg: Optional[RunConfig]):
    if args.mock_script:
        return make_backends(cfg or RunConfig(goal="-"), args.mock_script)
    if cfg is None:
        raise ConfigError("pass --config with a backend or --mock-script")
    return make_backends(cfg)


def _run(args) -> int:
    if args.command is None:
        raise UsageError("a command is required (build-map, run, eval, meta, inspect)")
    ws = Workspace(args.workspace)
    if args.command == "inspect":
        path = Path(args.map) if args.map else ws.map_path
        if not path.exists():
            raise ConfigError(f"no map at {path}")
        sys.stdout.write(inspect_map(map_model.load(path.read_bytes())))
        return EXIT_OK

    cfg = _config(args)
    if args.command == "build-map":
        m = cmd_build_map(cfg, ws, _backends(args, cfg))
        print(f"map: {ws.map_path} ({len(m.nodes)} nodes)")
        return EXIT_OK

    if args.command == "run":
        if args.n < 0:
            raise ConfigError("--n must be non-negative")
        records = cmd_run(cfg, ws, _backends(args, cfg), args.n, args.seed)
        for r in records:
            print(f"{r.name}: {r.status}" + (f" ({r.error})" if r.error else ""))
        ok = sum(r.status == "report" for r in records)
        print(f"{ok}/{len(records)} loops produced a report")
        return EXIT_OK if ok or not records else EXIT_FAILURE

    if args.command == "eval":
        paths = expand_reports(args.reports) if args.reports else ws.report_paths()
        if not paths:
            raise ConfigError("no report files found")
        cit_path = Path(args.citations) if args.citations else ws.citations_path
        if not cit_path.exists():
            raise ConfigError(f"no citation database at {cit_path}")
        metrics = tuple(x.strip() for x in args.metrics.split(",") if x.strip())
        backends = _backends(args, cfg) if "all" in metrics else None
        eval_cfg = cfg.eval if cfg else EvalConfig()
        scores = cmd_eval(paths, CitationDB(cit_path), backends, eval_cfg, cfg.goal if cfg else "",
                          ws if ws.root.exists() else None, metrics,
                          read_history(args.history) if args.history else None)
        if args.out:
            write_json(Path(args.out), scores)
        else:
            for p, s in scores.items():
                stem = Path(p).parent.name if Path(p).name == "report.json" else Path(p).stem
                write_json(ws.evals / f"{stem}.json", s)
        print(json.dumps(_headline(scores), indent=2))
        return EXIT_OK

    if args.command == "meta":
        paths = expand_reports(args.reports) if args.reports else ws.report_paths()
        if not paths:
            raise ConfigError("no report files found")
        mcfg = cfg.meta
        if args.k is not None:
            if args.k < 1:
                raise ConfigError("--k must be at least 1")
            mcfg = MetaConfig(**{**mcfg.__dict__, "k": args.k})
        written = cmd_meta(paths, _backends(args, cfg), cfg.goal, mcfg, ws.meta)
        for w in written:
            print(w)
        return EXIT_OK

    raise UsageError(f"unknown command {args.command}")


def _headline(scores: dict) -> dict:
    out = {}
    for p, s in scores.items():
        if "scaled" in s:
            out[p] = s["scaled"]
        else:
            # partial metric sets store fractions; report them on the same 0-100 scale
            out[p] = {k: None if v.get("score") is None else 100.0 * v["score"] for k, v in s.items()}
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WorkspaceBusy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (BackendError, FormatError, BuildError, map_model.MapFormatError, OSError, ValueError) as exc:
        print(f"pipeline failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
