"""taxoclean: extract and refine class taxonomies from truthy triple dumps."""

__version__ = "0.1.0"

from .ids import EntityId, qid
from .ingest import EntityStore, ingest, ingest_path, parse_line
from .taxonomy import ClassRecord, TaxonomyGraph, load_taxonomy, save_taxonomy
from .extract import extract_taxonomy
from .oracle import LinkQuery, MockBackend, Relation, build_prompt, parse_response
from .refine import MergeMap, RefineReport, refine
from .metrics import QualityReport, compute_report
from .typing_eval import EvalResult, TypeStatement, aggregate, sample_statements

__all__ = [
    "EntityId",
    "qid",
    "EntityStore",
    "ingest",
    "ingest_path",
    "parse_line",
    "ClassRecord",
    "TaxonomyGraph",
    "load_taxonomy",
    "save_taxonomy",
    "extract_taxonomy",
    "LinkQuery",
    "MockBackend",
    "Relation",
    "build_prompt",
    "parse_response",
    "MergeMap",
    "RefineReport",
    "refine",
    "QualityReport",
    "compute_report",
    "EvalResult",
    "TypeStatement",
    "aggregate",
    "sample_statements",
]
