"""Command-line driver for every pipeline stage.

Each subcommand prints one JSON summary line on stdout and writes its
artifacts under the output directory. Exit status: 0 success, 1 pipeline
error, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from .config import Config, load_config
from .crw import REFERENCE_MIX, UNIFORM_MIX, PathCorpus, sample_corpus
from .curation import contamination_check, evaluate, split_by_rejection
from .errors import ConfigError, KGWalkError
from .runtime import parse_trajectory, run_episode, trajectory_to_json
from .sparql import QUERY_KINDS, render_sparql
from .store import read_lines
from .synth import run_synthesis, write_synthesis

log = logging.getLogger("kgwalk")


def _emit(summary: dict[str, Any]) -> None:
    print(json.dumps(summary, ensure_ascii=False, sort_keys=True), flush=True)


def _out_dir(cfg: Config, args: argparse.Namespace) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError as exc:
                    raise KGWalkError(f"{path}:{n}: invalid JSON ({exc})") from None
    return rows


def _read_trajectories(path: str | Path) -> list:
    return [parse_trajectory(r) for r in _read_jsonl(path)]


def _read_gold(path: str | None) -> dict[str, list[str]] | None:
    if not path:
        return None
    return {str(r["qid"]): list(r["answers"]) for r in _read_jsonl(path)}


def _write_jsonl(path: Path, lines: Sequence[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_load(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    store = cfg.build_store()
    stats = store.stats()
    out = _out_dir(cfg, args)
    (out / "store_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return stats


def cmd_sample_paths(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    if args.seed is not None:
        cfg.walk.rng_seed = args.seed
    if args.mix:
        cfg.walk.structure_mix = dict(UNIFORM_MIX if args.mix == "uniform" else REFERENCE_MIX)
    store = cfg.build_store()
    wcfg = cfg.walk_config(store)
    n = args.n or cfg.walk.n
    corpus = sample_corpus(store, wcfg, n)
    path = Path(args.output) if args.output else _out_dir(cfg, args) / "paths.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    corpus.write(path)
    return {"paths": len(corpus.paths), "histogram": corpus.structure_histogram, "exhausted": corpus.exhausted,
            "rejected": dict(corpus.rejected), "output": str(path)}


def cmd_synthesize(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    store = cfg.build_store()
    if args.paths:
        paths = PathCorpus.read(args.paths).paths
    else:
        paths = sample_corpus(store, cfg.walk_config(store), cfg.walk.n).paths
    gateway = cfg.build_gateway()
    toolbox = cfg.build_toolbox(store, gateway)
    scfg = cfg.synth_config()
    result = run_synthesis(paths, toolbox, gateway, scfg)
    out = _out_dir(cfg, args)
    manifest = write_synthesis(result, out, scfg, {"rng_seed": cfg.walk.rng_seed})
    return {k: manifest[k] for k in ("input", "emitted", "dropped", "quarantined", "counters")} | {"output": str(out)}


def cmd_curate(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    trajs = _read_trajectories(args.input)
    accepted, rejected = split_by_rejection(trajs, _read_gold(args.gold), cfg.pipeline.em_convention)
    out = _out_dir(cfg, args)
    _write_jsonl(out / "accepted.jsonl", [trajectory_to_json(t) for t in accepted])
    _write_jsonl(out / "rejected.jsonl", [
        json.dumps({"qid": t.qid, "reasons": list(d.reasons), "trajectory": json.loads(trajectory_to_json(t))},
                   ensure_ascii=False, sort_keys=True)
        for t, d in rejected
    ])
    reasons: dict[str, int] = {}
    for _, d in rejected:
        for r in d.reasons:
            reasons[r] = reasons.get(r, 0) + 1
    return {"input": len(trajs), "accepted": len(accepted), "rejected": len(rejected), "reasons": reasons}


def _questions_from(path: str) -> list[str]:
    if path.endswith(".jsonl"):
        return [r["question"] for r in _read_jsonl(path)]
    return read_lines(path)


def cmd_contaminate(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    if args.synth.endswith(".jsonl"):
        rows = _read_jsonl(args.synth)
        synth = {str(r.get("qid") or i): r["question"] for i, r in enumerate(rows)}
    else:
        synth = {str(i): q for i, q in enumerate(read_lines(args.synth))}
    tests: dict[str, list[str]] = {}
    for item in args.test:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        tests[name] = _questions_from(path)
    p = cfg.pipeline
    report = contamination_check(cfg.build_gateway(), synth, tests, tuple(p.contamination_thresholds),
                                 exclusion_threshold=p.exclusion_threshold,
                                 model=cfg.gateway.embedding_model if cfg.gateway.backend == "http" else "")
    out = _out_dir(cfg, args)
    (out / "contamination.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "contamination.txt").write_text(report.render_table() + "\n", encoding="utf-8")
    return {"total": report.total, "excluded": len(report.excluded),
            "flagged": {f"{t:.2f}": report.flagged(t) for t in report.thresholds}}


def cmd_rollout(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    store = cfg.build_store()
    gateway = cfg.build_gateway()
    rcfg = cfg.runtime_config()
    lines, answered = [], 0
    for row in _read_jsonl(args.questions):
        for run in range(args.runs):
            toolbox = cfg.build_toolbox(store, gateway)
            traj = run_episode(toolbox, gateway, row["question"], row["topic_entities"], rcfg,
                               qid=str(row.get("qid", "")), gold_answers=row.get("answers"),
                               metadata={"run": run})
            answered += traj.answered
            lines.append(trajectory_to_json(traj))
    out = _out_dir(cfg, args)
    _write_jsonl(out / "rollouts.jsonl", lines)
    return {"episodes": len(lines), "answered": answered, "output": str(out / "rollouts.jsonl")}


def cmd_eval(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    try:
        ks = tuple(int(k) for k in args.k.split(",") if k.strip())
    except ValueError:
        raise ConfigError(f"--k must be a comma-separated list of integers, got {args.k!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--k values must be >= 1")
    report = evaluate(_read_trajectories(args.input), _read_gold(args.gold), ks=ks,
                      convention=cfg.pipeline.em_convention)
    out = _out_dir(cfg, args)
    (out / "eval.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return report.aggregates


def cmd_serve(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    from .service import make_server

    store = cfg.build_store()
    toolbox = cfg.build_toolbox(store, cfg.build_gateway() if cfg.tools.rerank else None)
    server = make_server(toolbox, args.host, args.port)
    _emit({"command": "serve", "status": "listening", "url": server.url})
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {"status": "stopped"}


def cmd_render_sparql(cfg: Config, args: argparse.Namespace) -> dict[str, Any]:
    bindings = {k: v for k, v in (("name", args.name), ("entity", args.entity), ("relation", args.relation)) if v}
    query = render_sparql(args.kind, bindings)
    if args.raw:
        sys.stdout.write(query)
        return {}
    return {"kind": args.kind, "query": query}


COMMANDS: dict[str, Callable[[Config, argparse.Namespace], dict[str, Any]]] = {
    "load": cmd_load,
    "sample-paths": cmd_sample_paths,
    "synthesize": cmd_synthesize,
    "curate": cmd_curate,
    "contaminate": cmd_contaminate,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "render-sparql": cmd_render_sparql,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply otherwise)")
    common.add_argument("--store", nargs="+", metavar="FILE", help="triple files (.tsv or .nt); overrides store.paths")
    common.add_argument("--stub-script", help="stub gateway script; forces the stub backend")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="kgwalk", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("load", parents=[common], help="build a store and report its size")

    p = sub.add_parser("sample-paths", parents=[common], help="sample a reasoning-path corpus")
    p.add_argument("--n", type=int, help="number of unique paths")
    p.add_argument("--seed", type=int, help="RNG seed")
    p.add_argument("--mix", choices=("reference", "uniform"), help="structure mix preset")
    p.add_argument("--output", help="corpus path (default OUT/paths.jsonl)")

    p = sub.add_parser("synthesize", parents=[common], help="turn paths into trajectories")
    p.add_argument("--paths", help="path corpus JSONL (sampled from the config when omitted)")

    p = sub.add_parser("curate", parents=[common], help="outcome-based rejection sampling")
    p.add_argument("--input", required=True, help="trajectory JSONL")
    p.add_argument("--gold", help="gold JSONL with qid and answers (else trajectory gold)")

    p = sub.add_parser("contaminate", parents=[common], help="similarity check against test questions")
    p.add_argument("--synth", required=True, help="trajectory JSONL or plain question list")
    p.add_argument("--test", required=True, nargs="+", metavar="NAME=FILE", help="test question files")

    p = sub.add_parser("rollout", parents=[common], help="run the policy over a question file")
    p.add_argument("--questions", required=True, help="JSONL with qid, question, topic_entities, answers")
    p.add_argument("--runs", type=int, default=1, help="episodes per question")

    p = sub.add_parser("eval", parents=[common], help="metrics over a trajectory file")
    p.add_argument("--input", required=True)
    p.add_argument("--gold")
    p.add_argument("--k", default="1", help="comma-separated Pass@k values, e.g. 1,8,32")

    p = sub.add_parser("serve", parents=[common], help="HTTP tool service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)

    p = sub.add_parser("render-sparql", parents=[common], help="render a query template")
    p.add_argument("--kind", required=True, choices=QUERY_KINDS)
    p.add_argument("--entity")
    p.add_argument("--name")
    p.add_argument("--relation")
    p.add_argument("--raw", action="store_true", help="print the query text instead of JSON")
    return parser


def _config_for(args: argparse.Namespace) -> Config:
    overrides: dict[str, Any] = {}
    if args.store:
        overrides["store"] = {"paths": [str(Path(p).resolve()) for p in args.store], "backend": "memory"}
    if args.stub_script:
        overrides["gateway"] = {"backend": "stub", "stub_script": str(Path(args.stub_script).resolve())}
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_for(args)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return 0
        summary = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _emit({"command": args.command, "status": "config-error", "error": str(exc)})
        print(f"kgwalk: configuration error: {exc}", file=sys.stderr)
        return 2
    except (KGWalkError, OSError, KeyError) as exc:
        _emit({"command": args.command, "status": "error", "error": f"{type(exc).__name__}: {exc}"})
        print(f"kgwalk: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    if summary or not getattr(args, "raw", False):
        _emit({"command": args.command, "status": "ok", **summary})
    return 0


if __name__ == "__main__":
    sys.exit(main())
