"""Command line entry point: ``factverify {ingest,index,retrieve,verify,evaluate,report}``.

Exit codes: 0 success, 1 validation error, 2 backend error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from .backends import MockBackend, RemoteBackend, RemoteBackendConfig, ScriptError, load_script
from .corpus import (CorpusError, load_dataset, load_evidence_library, merge_dedup, save_dataset,
                     save_evidence_library)
from .decoding import BackendError, RewardConfig
from .metrics import InfluenceWeights, JudgeError, evaluate, make_judge
from .pipeline import Caps, TemplateError, load_predictions, run_many, save_predictions, trace_file
from .retrieval import (DATE_MODES, BM25Retriever, IndexFormatError, RankedList, build_index, load_index,
                        save_index)

log = logging.getLogger("factverify")

EXIT_OK, EXIT_VALIDATION, EXIT_BACKEND, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Run record; digests are taken up front and the file is written even on failure."""

    def __init__(self, command: str, args: argparse.Namespace, inputs: list, path: Optional[Path]):
        self.path = path
        self.data = {
            "command": command,
            "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
            "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()},
            "versions": {"factverify": __version__, "python": platform.python_version()},
            "traces": [],
            "status": "running",
            "timings": {},
        }
        self._t0 = time.perf_counter()
        self.data["timings"]["started"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")

    def finish(self, status: str) -> None:
        self.data["status"] = status
        self.data["timings"]["wall_s"] = round(time.perf_counter() - self._t0, 6)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8") as fh:
                json.dump(self.data, fh, indent=2, sort_keys=True, default=str)
                fh.write("\n")


def _manifest_path(args, out) -> Optional[Path]:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if out is None:
        return None
    out = Path(out)
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    libraries = [load_evidence_library(args.evidence)]
    for extra in args.extra_evidence or []:
        libraries.append(load_evidence_library(extra))
    docs = merge_dedup(libraries) if len(libraries) > 1 else libraries[0]
    samples = load_dataset(args.claims, evidence_ids=[d.id for d in docs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_evidence_library(docs, out / "evidence.jsonl")
    save_dataset(samples, out / "claims.jsonl")
    print(f"ingested {len(samples)} claims and {len(docs)} evidence documents into {out}")
    return EXIT_OK


def _store_paths(path) -> tuple[Path, Path]:
    """(index file, evidence file) for a store directory or an index file path."""
    p = Path(path)
    if p.is_dir():
        return p / "index.jsonl", p / "evidence.jsonl"
    return p, p.with_name("evidence.jsonl")


def cmd_index(args) -> int:
    store = Path(args.store)
    evidence = store / "evidence.jsonl" if store.is_dir() else store
    docs = load_evidence_library(evidence)
    if not docs:
        raise UsageError(f"{evidence}: evidence store is empty")
    index = build_index(docs, k1=args.k1, b=args.b, date_mode=args.date_mode)
    out = Path(args.out) if args.out else (store if store.is_dir() else store.parent) / "index.jsonl"
    save_index(index, out)
    print(f"indexed {index.corpus_size} documents, {len(index.postings)} terms -> {out}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    index_path, _ = _store_paths(args.index)
    index = load_index(index_path)
    samples = load_dataset(args.claims)
    retriever = BM25Retriever(index, args.date_mode)
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in samples:
            ranked = retriever.retrieve(s, args.k)
            fh.write(json.dumps(ranked.to_json(), ensure_ascii=False) + "\n")
    print(f"wrote rankings for {len(samples)} claims -> {args.out}")
    return EXIT_OK


def _make_backend(spec: str, tier: Optional[str], args):
    if spec.startswith("mock:"):
        return MockBackend(load_script(spec[5:]), tier or "logits")
    if spec.startswith(("http://", "https://")) or spec == "env":
        cfg = RemoteBackendConfig.from_env(None if spec == "env" else spec, tier=tier or "bias",
                                           model=args.model, timeout=args.timeout,
                                           max_retries=args.retries)
        return RemoteBackend(cfg)
    raise UsageError(f"unknown backend {spec!r}; use mock:SCRIPT or an http(s) URL")


def cmd_verify(args, manifest: Manifest) -> int:
    index_path, evidence_path = _store_paths(args.index)
    if args.evidence:
        evidence_path = Path(args.evidence)
    docs = load_evidence_library(evidence_path)
    evidence = {d.id: d.text for d in docs}
    samples = load_dataset(args.claims, evidence_ids=evidence)
    index = None if args.gold_evidence else load_index(index_path)
    retriever = BM25Retriever(index, args.date_mode) if index is not None else None

    cfg = RewardConfig(delta0=args.delta0, gamma=args.gamma, trigger=tuple(args.trigger.split(",")),
                       reward_targets=frozenset(args.reward_targets.split(",")),
                       max_reflections=args.max_reflections)
    caps = Caps(max_evidence=args.max_evidence, evidence_budget=args.evidence_budget,
                max_output_tokens=args.max_output_tokens, gold_evidence=args.gold_evidence)
    backend = _make_backend(args.backend, args.tier, args)

    out = Path(args.out)
    done: set[str] = set()
    if args.resume and out.exists():
        done = {r.id for r in load_predictions(out)}
    elif out.exists():
        out.unlink()
    todo = [s for s in samples if s.id not in done]
    if done:
        log.info("resuming: %d claims already predicted, %d to go", len(done), len(todo))

    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir:
        trace_dir.mkdir(parents=True, exist_ok=True)

    def on_done(rec):
        save_predictions([rec], out, append=True)

    clock = (lambda: 0.0) if args.no_timing else time.perf_counter
    if trace_dir:
        manifest.data["traces"] = [str(trace_file(trace_dir, s.id)) for s in todo]
    records = run_many(todo, retriever, backend, cfg, caps, evidence, args.parallel, on_done,
                       trace_dir=trace_dir, clock=clock)
    labels = {}
    for r in records:
        labels[r.predicted_label] = labels.get(r.predicted_label, 0) + 1
    print(f"verified {len(records)} claims ({', '.join(f'{k}={v}' for k, v in sorted(labels.items()))}) -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    samples = load_dataset(args.claims)
    preds = {r.id: r for r in load_predictions(args.predictions)}
    missing = [s.id for s in samples if s.id not in preds]
    if missing:
        raise UsageError(f"predictions missing for ids: {', '.join(missing)}")
    rankings = None
    if not args.skip_retrieval_metrics:
        if not args.rankings:
            raise UsageError("--rankings is required unless --skip-retrieval-metrics is given")
        with open(args.rankings, encoding="utf-8") as fh:
            rows = [RankedList.from_json(json.loads(line)) for line in fh if line.strip()]
        rankings = {r.query_id: r for r in rows}
        absent = [s.id for s in samples if s.id not in rankings]
        if absent:
            raise UsageError(f"rankings missing for ids: {', '.join(absent)}")
    weights = InfluenceWeights.parse(args.weights) if args.weights else InfluenceWeights()
    report = evaluate(samples, preds, make_judge(args.judge), weights, rankings)
    Path(args.out).write_text(report.dumps(), encoding="utf-8")
    print(f"wrote report for {report.n} claims -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    data = json.loads(Path(args.report).read_text(encoding="utf-8"))
    rows = [(k, data[k]) for k in ("n", "accuracy", "f1_macro", "precision_macro", "recall_macro",
                                   "bleu4", "rouge1", "rouge2", "rougeL", "ecs_mean", "ecs_unscored", "hcpi")
            if k in data]
    for k, v in sorted((data.get("recall_at") or {}).items(), key=lambda kv: int(kv[0])):
        rows.append((f"R@{k}", v))
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        shown = f"{v:.4f}" if isinstance(v, float) else ("-" if v is None else str(v))
        print(f"{k:<{width}}  {shown}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser(config: Optional[dict] = None) -> argparse.ArgumentParser:
    """``config`` maps a command name to defaults overriding the built-in ones."""
    config = config or {}
    parser = argparse.ArgumentParser(prog="factverify", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate claims + evidence and write a store")
    p.add_argument("--claims", required=True)
    p.add_argument("--evidence", required=True)
    p.add_argument("--extra-evidence", action="append", help="additional evidence to merge and dedup")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_ingest, **config.get("ingest", {}))

    p = sub.add_parser("index", help="build the BM25 index for a store")
    p.add_argument("--store", required=True, help="store directory or evidence.jsonl")
    p.add_argument("--out")
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.add_argument("--date-mode", choices=DATE_MODES, default="off")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_index, **config.get("index", {}))

    p = sub.add_parser("retrieve", help="rank evidence for every claim")
    p.add_argument("--claims", required=True)
    p.add_argument("--index", required=True, help="store directory or index file")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--date-mode", choices=DATE_MODES, help="default: the mode recorded in the index")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_retrieve, **config.get("retrieve", {}))

    p = sub.add_parser("verify", help="run the verification pipeline")
    p.add_argument("--claims", required=True)
    p.add_argument("--index", required=True, help="store directory or index file")
    p.add_argument("--evidence", help="evidence.jsonl (default: next to the index)")
    p.add_argument("--backend", required=True, help="mock:SCRIPT, an http(s) base URL, or env")
    p.add_argument("--tier", choices=("logits", "bias"))
    p.add_argument("--model")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--max-evidence", type=int, default=3)
    p.add_argument("--evidence-budget", type=int, default=3000)
    p.add_argument("--max-reflections", type=int, default=3)
    p.add_argument("--max-output-tokens", type=int, default=5000)
    p.add_argument("--delta0", type=float, default=20.0)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--trigger", default="Conflict,:", help="comma-separated trigger token sequence")
    p.add_argument("--reward-targets", default="yes", help="comma-separated rewarded tokens")
    p.add_argument("--date-mode", choices=DATE_MODES)
    p.add_argument("--gold-evidence", action="store_true", help="use gold evidence instead of retrieval")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--trace-dir")
    p.add_argument("--no-timing", action="store_true", help="write wall_ms=0 for reproducible output")
    p.add_argument("--out", default="predictions.jsonl")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_verify, **config.get("verify", {}))

    p = sub.add_parser("evaluate", help="score predictions")
    p.add_argument("--claims", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--rankings")
    p.add_argument("--skip-retrieval-metrics", action="store_true")
    p.add_argument("--judge", default="rule", help="rule | full | partial | divergence | env | URL")
    p.add_argument("--weights", help="views,discussions,engagements,posts weights")
    p.add_argument("--out", default="report.json")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_evaluate, **config.get("evaluate", {}))

    p = sub.add_parser("report", help="print a report.json")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_report, **config.get("report", {}))
    return parser


def _inputs(args) -> list:
    return [getattr(args, k, None) for k in ("claims", "evidence", "predictions", "rankings", "store")] \
        + list(getattr(args, "extra_evidence", None) or []) \
        + ([args.backend[5:]] if str(getattr(args, "backend", "")).startswith("mock:") else []) \
        + ([_store_paths(args.index)[0]] if getattr(args, "index", None) else [])


def _load_config(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    with open(known.config, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise SystemExit(f"factverify: error: {known.config}: config must be a JSON object")
    return config


def _parse(argv) -> argparse.Namespace:
    """Parse flags over config-file values over built-in defaults.

    Top-level scalar keys apply to every command; a nested object keyed by a
    command name applies to that command only.
    """
    config = _load_config(argv)
    args = build_parser().parse_args(argv)
    if not config:
        return args
    section = {k: v for k, v in config.items() if not isinstance(v, dict)}
    section.update(config.get(args.command, {}))
    section = {k.replace("-", "_"): v for k, v in section.items()}
    unknown = sorted(set(section) - (set(vars(args)) - {"func", "command", "config"}))
    if unknown:
        build_parser().error(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    return build_parser({args.command: section}).parse_args(argv)


def main(argv=None) -> int:
    args = _parse(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = None
    status = "failed"
    try:
        manifest = Manifest(args.command, args, _inputs(args),
                            _manifest_path(args, getattr(args, "out", None)) if args.command != "report" else None)
        code = args.func(args, manifest) if args.func is cmd_verify else args.func(args)
        status = "ok"
        return code
    except BackendError as exc:
        print(f"error: backend: {exc}", file=sys.stderr)
        status = f"backend error: {exc}"
        return EXIT_BACKEND
    except (CorpusError, IndexFormatError, ScriptError, TemplateError, JudgeError, UsageError,
            FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        if isinstance(exc, FileNotFoundError):
            msg = f"no such file: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        status = f"validation error: {msg}"
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        status = f"internal error: {exc!r}"
        return EXIT_INTERNAL
    finally:
        if manifest is not None:
            manifest.finish(status)


if __name__ == "__main__":
    sys.exit(main())
