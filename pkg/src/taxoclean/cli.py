"""Command-line pipeline: extract, refine, metrics, eval, export-mapping.

Configuration comes from an optional JSON file plus flag overrides; all
randomness flows from one seed. Logs go to stderr, artifacts to the output
directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Set

from . import typing_eval as eval_mod
from .extract import extract_taxonomy
from .ids import EntityId
from .ingest import ingest_path, load_store, save_store
from .metrics import compute_report, save_report as save_metrics_report
from .oracle import CachingOracle, CompletionClient, LiveBackend, MockBackend, load_verdict_script
from .refine import (
    DROPPED_LABEL,
    MergeMap,
    load_mapping,
    refine as run_refine,
    save_mapping,
    save_report as save_refine_report,
)
from .taxonomy import (
    RootAbsentError,
    TaxonomyFormatError,
    load_taxonomy,
    load_typing,
    save_taxonomy,
    save_typing,
)

logger = logging.getLogger(__name__)

DEFAULT_CAP_PER_CLASS = 1000
DEFAULT_SAMPLE_TOTAL = 100_000
DEFAULT_SEED = 20240322
DEFAULT_RETRIES = 3
DEFAULT_CONCURRENCY = 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    oracle: str = "mock"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    retries: int = DEFAULT_RETRIES
    concurrency: int = DEFAULT_CONCURRENCY
    cache: Optional[str] = None
    verdicts: Optional[str] = None
    payload_style: str = "prompt"
    response_path: Optional[str] = None
    api_key_env: Optional[str] = None
    seed: int = DEFAULT_SEED
    cap_per_class: int = DEFAULT_CAP_PER_CLASS
    sample_total: int = DEFAULT_SAMPLE_TOTAL

    def validate(self) -> None:
        if self.seed <= 0 or self.cap_per_class <= 0 or self.sample_total <= 0:
            raise ConfigError("seed and sampling caps must be positive")
        if self.oracle in ("live", "cached-live"):
            if not self.endpoint or not self.model:
                raise ConfigError(f"oracle '{self.oracle}' needs --endpoint and --model")
        elif self.oracle == "mock":
            if not self.verdicts:
                raise ConfigError("mock oracle needs --verdicts (a scripted verdict file)")
        else:
            raise ConfigError(f"unknown oracle kind: {self.oracle}")


_CONFIG_KEYS = {
    "oracle",
    "endpoint",
    "model",
    "retries",
    "concurrency",
    "cache",
    "verdicts",
    "payload_style",
    "response_path",
    "api_key_env",
    "seed",
    "cap_per_class",
    "sample_total",
}


def load_config(args: argparse.Namespace) -> RunConfig:
    values: Dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(raw)
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return RunConfig(**values)


def make_oracle(config: RunConfig):
    config.validate()
    if config.oracle == "mock":
        backend = MockBackend(load_verdict_script(config.verdicts))
        if config.cache:
            backend = CachingOracle(backend, config.cache)
        return backend
    client = CompletionClient(
        url=config.endpoint,
        model=config.model,
        retries=config.retries,
        payload_style=config.payload_style,
        response_path=config.response_path,
        api_key=os.environ.get(config.api_key_env) if config.api_key_env else None,
    )
    backend = LiveBackend(client)
    if config.oracle == "cached-live":
        if not config.cache:
            raise ConfigError("cached-live oracle needs --cache")
        backend = CachingOracle(backend, config.cache)
    return backend


# -- subcommands ----------------------------------------------------------------

def cmd_extract(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.from_snapshot:
        store = load_store(args.from_snapshot)
    else:
        store = ingest_path(args.dump)
    logger.info(
        "ingested %d retained entities (%d parse errors)",
        len(store.records),
        store.parse_errors,
    )
    result = extract_taxonomy(store, with_typing=not args.no_typing)
    g = result.taxonomy
    save_taxonomy(g, out_dir / "nodes.tsv", out_dir / "edges.tsv")
    if not args.no_typing:
        save_typing(g.instance_types, out_dir / "typing.jsonl")
    with open(out_dir / "excluded.tsv", "w", encoding="utf-8") as fh:
        for node in sorted(result.excluded_classes):
            fh.write(f"{node}\n")
    with open(out_dir / "extract_report.json", "w", encoding="utf-8") as fh:
        json.dump(result.counts, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if args.snapshot:
        save_store(store, out_dir / "store.snapshot")
    print(
        f"extracted {result.counts['final_classes']} classes, "
        f"{result.counts['final_edges']} links -> {out_dir}"
    )
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    config = load_config(args)
    backend = make_oracle(config)
    g = load_taxonomy(args.nodes, args.edges)
    if args.typing:
        g.attach_typing(load_typing(args.typing))
        g.refresh_cumulative()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_refine(g, backend, max_workers=config.concurrency)
    refined = result.taxonomy
    save_taxonomy(refined, out_dir / "refined_nodes.tsv", out_dir / "refined_edges.tsv")
    save_mapping(result.merge_map, out_dir / "mapping.tsv")
    if refined.instance_types:
        save_typing(refined.instance_types, out_dir / "refined_typing.jsonl")
    save_refine_report(result.report, out_dir / "refine_report.json")
    print(result.report.render_text(), file=sys.stderr)
    print(
        f"refined to {result.report.output_classes} classes, "
        f"{result.report.output_links} links -> {out_dir}"
    )
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    g = load_taxonomy(args.nodes, args.edges)
    if args.typing:
        g.attach_typing(load_typing(args.typing))
    sample = None
    if args.sample and g.instance_types:
        instances = sorted(g.instance_types)
        if args.sample < len(instances):
            rng = random.Random(args.seed if args.seed is not None else DEFAULT_SEED)
            sample = sorted(rng.sample(instances, args.sample))
    report = compute_report(g, sample)
    if args.format == "json":
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    else:
        print(report.render_text())
    if args.out:
        save_metrics_report(report, args.out)
    return 0


def _load_excluded(path) -> Set[EntityId]:
    out: Set[EntityId] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.add(EntityId.parse(line))
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    pre_graph = load_taxonomy(args.nodes, args.edges)
    if args.refined_nodes:
        if not args.mapping:
            raise ConfigError("--refined-nodes needs --mapping")
        target_graph = load_taxonomy(args.refined_nodes, args.refined_edges)
        merge_map: Optional[MergeMap] = MergeMap()
        for source, target in load_mapping(args.mapping).items():
            if target is None:
                merge_map.drop(source)
            elif target != source:
                merge_map.merge(source, target)
            else:
                merge_map.merge(source, source)
    else:
        target_graph = pre_graph
        merge_map = None

    typing = load_typing(args.typing)
    watch = set(typing)
    store = ingest_path(args.dump, watch_set=watch)
    excluded = _load_excluded(args.excluded) if args.excluded else set()

    pool = eval_mod.collect_instances(store, excluded)
    pool = {e: info for e, info in pool.items() if e in typing}
    for entity, info in pool.items():
        info.classes &= typing[entity]
    pool = {e: info for e, info in pool.items() if info.classes}

    retyped, retype_stats = eval_mod.retype_all(pool, pre_graph, target_graph, merge_map)
    statements, sample_stats = eval_mod.sample_statements(
        retyped, target_graph, config.cap_per_class, config.sample_total, config.seed
    )
    eval_mod.save_statements(statements, out_dir / "statements.jsonl")
    logger.info(
        "judging %d statements from %d instances",
        len(statements),
        sample_stats.sampled_instances,
    )

    judge_backend = _make_judge(args, config, store, pre_graph)
    result, _ = eval_mod.run_evaluation(
        statements, judge_backend, log_path=out_dir / "judgments.jsonl"
    )
    payload = result.to_dict()
    payload["excluded_no_ancestor"] = retype_stats.excluded_no_ancestor
    payload["sampled_instances"] = sample_stats.sampled_instances
    payload["sample_shortfall"] = sample_stats.shortfall
    with open(out_dir / "eval_results.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(result.render_text())
    return 0


def _make_judge(args: argparse.Namespace, config: RunConfig, store, pre_graph):
    kind = args.judge
    if kind == "mock":
        # planted truth: the classes the dump asserts, expanded through the
        # pre-refinement taxonomy
        truth: Dict[EntityId, Set[EntityId]] = {}
        for entity, rec in store.records.items():
            classes = rec.instance_of | rec.occupations
            if not classes:
                continue
            expanded: Set[EntityId] = set()
            for cls in classes:
                if cls in pre_graph.nodes:
                    expanded.add(cls)
                    expanded |= pre_graph.ancestors(cls)
            if expanded:
                truth[entity] = expanded
        return eval_mod.MockJudge(truth)
    if kind == "live":
        if not config.endpoint or not config.model:
            raise ConfigError("live judge needs --endpoint and --model")
        client = CompletionClient(
            url=config.endpoint,
            model=config.model,
            retries=config.retries,
            payload_style=config.payload_style,
            response_path=config.response_path,
            api_key=os.environ.get(config.api_key_env) if config.api_key_env else None,
        )
        return eval_mod.LiveJudge(client)
    raise ConfigError(f"unknown judge kind: {kind}")


def cmd_export_mapping(args: argparse.Namespace) -> int:
    mapping = load_mapping(args.mapping)
    survivors: Optional[Set[EntityId]] = None
    if args.refined_nodes:
        refined = load_taxonomy(args.refined_nodes, args.refined_edges)
        survivors = set(refined.nodes)
        bad = [
            str(source)
            for source, target in sorted(mapping.items())
            if target is not None and target not in survivors
        ]
        if bad:
            print(
                f"error: {len(bad)} mapping targets are not refined classes "
                f"(first: {bad[0]})",
                file=sys.stderr,
            )
            return 1
    out = args.out or "-"
    rows = [
        f"{source}\t{target if target is not None else DROPPED_LABEL}"
        for source, target in sorted(mapping.items())
    ]
    from .taxonomy import MAPPING_FORMAT, format_header

    text = format_header(MAPPING_FORMAT) + "\n" + "\n".join(rows) + "\n"
    if out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


# -- parser -----------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--oracle", choices=["mock", "live", "cached-live"], default=None)
    p.add_argument("--endpoint", help="completion endpoint URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--retries", type=int, default=None)
    p.add_argument("--concurrency", type=int, default=None)
    p.add_argument("--cache", help="JSON-lines oracle cache path")
    p.add_argument("--verdicts", help="scripted verdict file for the mock oracle")
    p.add_argument("--payload-style", dest="payload_style", choices=["prompt", "messages"], default=None)
    p.add_argument("--response-path", dest="response_path", help="JSON path of the completion text")
    p.add_argument("--api-key-env", dest="api_key_env", help="env var holding a bearer token")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cap-per-class", dest="cap_per_class", type=int, default=None)
    p.add_argument("--sample-total", dest="sample_total", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taxoclean",
        description="Extract and refine a class taxonomy from a truthy triple dump.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="stream a dump into a pre-refinement taxonomy")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--dump", help="N-Triples dump, plain or .gz")
    group.add_argument("--from-snapshot", dest="from_snapshot", help="resume from a store snapshot")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-typing", action="store_true", help="skip the typing.jsonl artifact")
    p.add_argument("--snapshot", action="store_true", help="write a resumable store snapshot")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("refine", help="run the six refinement steps")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--typing", help="typing.jsonl from extract")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("metrics", help="quality table for a taxonomy")
    p.add_argument("--nodes", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--typing")
    p.add_argument("--sample", type=int, default=DEFAULT_SAMPLE_TOTAL, help="instance sample size for path counting")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--format", choices=["table", "json"], default="table")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("eval", help="entity-typing evaluation with a judge oracle")
    p.add_argument("--dump", required=True)
    p.add_argument("--nodes", required=True, help="pre-refinement nodes file")
    p.add_argument("--edges", required=True)
    p.add_argument("--refined-nodes", dest="refined_nodes")
    p.add_argument("--refined-edges", dest="refined_edges")
    p.add_argument("--mapping")
    p.add_argument("--typing", required=True)
    p.add_argument("--excluded", help="ids excluded from instance collection")
    p.add_argument("--out", required=True)
    p.add_argument("--judge", choices=["mock", "live"], default="mock")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mapping", help="validate and re-emit a mapping file")
    p.add_argument("--mapping", required=True)
    p.add_argument("--refined-nodes", dest="refined_nodes")
    p.add_argument("--refined-edges", dest="refined_edges")
    p.add_argument("--out", help="target path; stdout when omitted")
    p.set_defaults(func=cmd_export_mapping)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=os.environ.get("TAXOCLEAN_LOGLEVEL", "INFO"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, TaxonomyFormatError, RootAbsentError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
