"""Pluggable oracle answering "how does class A relate to class B?".

Three interchangeable backends: a live HTTP completion endpoint driven at
temperature zero, a persistent JSON-lines cache wrapping any backend, and a
deterministic scripted table for tests and replays.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import requests

from .ids import EntityId

logger = logging.getLogger(__name__)


class Relation(Enum):
    SUBCLASS_OF = "subclass_of"
    SUPERCLASS_OF = "superclass_of"
    EQUIVALENT = "equivalent"
    IRRELEVANT = "irrelevant"
    NO_RELATION = "no_relation"


@dataclass(frozen=True)
class ConceptCard:
    id: EntityId
    label: str
    description: str


@dataclass(frozen=True)
class LinkQuery:
    child: ConceptCard
    parent: ConceptCard


@dataclass(frozen=True)
class OracleResponse:
    relation: Relation
    raw_text: str
    explanation: str = ""


PROMPT_TEMPLATE = """%Instructions:
You are a linguistic expert who understands the semantic relationships between concepts. Your task is to determine the most appropriate semantic relation between two provided concepts based on the available labels and descriptions. The potential relations are: "subclass of", "superclass of", "equivalent to", "irrelevant to", or "None" if none applies. You should select exclusively from these relation options and not introduce other relationships.
Please structure your response as follows:
Response:::
Explanation: (your analysis of the semantic relation between two concepts).
Answer: (state the relation explicitly, e.g. "ConceptA is [relation] ConceptB")

%User Message:
Examine the relation between the following two concepts, each described below:
* ConceptA: labeled as "{child_label}", described as "{child_description}".
* ConceptB: labeled as "{parent_label}", described as "{parent_description}".
Response:::"""


def build_prompt(query: LinkQuery) -> str:
    """Byte-stable prompt with the four fields substituted."""
    return PROMPT_TEMPLATE.format(
        child_label=query.child.label,
        child_description=query.child.description,
        parent_label=query.parent.label,
        parent_description=query.parent.description,
    )


# Precedence order is fixed: the first phrase found wins.
_RELATION_PHRASES: Sequence[Tuple[Relation, str]] = (
    (Relation.SUBCLASS_OF, "subclass of"),
    (Relation.SUPERCLASS_OF, "superclass of"),
    (Relation.EQUIVALENT, "equivalent to"),
    (Relation.IRRELEVANT, "irrelevant to"),
    (Relation.NO_RELATION, "none"),
)

_FLIPPED = {
    Relation.SUBCLASS_OF: Relation.SUPERCLASS_OF,
    Relation.SUPERCLASS_OF: Relation.SUBCLASS_OF,
    Relation.EQUIVALENT: Relation.EQUIVALENT,
    Relation.IRRELEVANT: Relation.IRRELEVANT,
}

_ANSWER_MARKER = re.compile(r"answer\s*:", re.IGNORECASE)
_COPULA_TAIL = {"is", "are", "a", "an", "the", "as"}
_PUNCT = ".,;:!?()\"'*[]{}"


def _tokens(text: str) -> List[str]:
    out = []
    for raw in text.split():
        token = raw.strip(_PUNCT).lower()
        if token:
            out.append(token)
    return out


def _anchor_side(
    tokens: List[str], child_label: Optional[str], parent_label: Optional[str]
) -> Optional[str]:
    """Which concept a token tail/head names: 'child', 'parent', or None."""
    candidates: List[Tuple[str, List[str]]] = [
        ("child", ["concepta"]),
        ("parent", ["conceptb"]),
    ]
    if child_label:
        candidates.append(("child", _tokens(child_label)))
    if parent_label:
        candidates.append(("parent", _tokens(parent_label)))
    # longer labels first so "coke plant" wins over "coke" when both could match
    candidates.sort(key=lambda item: len(item[1]), reverse=True)
    for side, anchor in candidates:
        if anchor and tokens == anchor:
            return side
    return None


def parse_response(
    raw: str,
    child_label: Optional[str] = None,
    parent_label: Optional[str] = None,
) -> Relation:
    """Extract the stated relation from a completion; total over all inputs.

    Only the segment after the last "Answer:" marker counts. The relation
    phrase must bind the child concept on the left and the parent on the
    right (either as ConceptA/ConceptB or by exact label); a reversed binding
    flips the direction. Anything else is a non-answer.
    """
    matches = list(_ANSWER_MARKER.finditer(raw))
    if not matches:
        return Relation.NO_RELATION
    segment = " ".join(raw[matches[-1].end() :].split())
    lowered = segment.lower()

    relation = None
    pos = -1
    length = 0
    for candidate, phrase in _RELATION_PHRASES:
        found = re.search(rf"(?<![a-z]){re.escape(phrase)}(?![a-z])", lowered)
        if found:
            relation, pos, length = candidate, found.start(), found.end() - found.start()
            break
    if relation is None:
        return Relation.NO_RELATION
    if relation is Relation.NO_RELATION:
        return Relation.NO_RELATION

    left_tokens = _tokens(segment[:pos])
    while left_tokens and left_tokens[-1] in _COPULA_TAIL:
        left_tokens.pop()
    left_side = None
    for take in range(1, len(left_tokens) + 1):
        side = _anchor_side(left_tokens[-take:], child_label, parent_label)
        if side is not None:
            left_side = side
    if left_side is None:
        return Relation.NO_RELATION

    right = segment[pos + length :]
    right_side = _match_right(right, child_label, parent_label)
    if right_side is None:
        return Relation.NO_RELATION

    if left_side == "child" and right_side == "parent":
        return relation
    if left_side == "parent" and right_side == "child":
        return _FLIPPED[relation]
    return Relation.NO_RELATION


def _match_right(
    right: str, child_label: Optional[str], parent_label: Optional[str]
) -> Optional[str]:
    """Match the text after the phrase against an anchor, longest first.

    The anchor must be followed by nothing or by punctuation; a plain-word
    continuation means the answer names some other entity.
    """
    raw_words = right.strip().split()
    if raw_words and raw_words[0].strip(_PUNCT).lower() in ("a", "an", "the"):
        raw_words = raw_words[1:]
    stripped_words = [w.strip(_PUNCT).lower() for w in raw_words]

    candidates: List[Tuple[str, str]] = [("child", "concepta"), ("parent", "conceptb")]
    if child_label:
        candidates.append(("child", child_label))
    if parent_label:
        candidates.append(("parent", parent_label))
    candidates.sort(key=lambda item: len(item[1]), reverse=True)

    for side, anchor in candidates:
        toks = _tokens(anchor)
        if not toks or len(raw_words) < len(toks):
            continue
        if stripped_words[: len(toks)] != toks:
            continue
        last_raw = raw_words[len(toks) - 1]
        if len(raw_words) == len(toks):
            return side
        if last_raw.rstrip(_PUNCT) != last_raw:
            return side  # punctuation closes the name
        nxt = raw_words[len(toks)]
        if nxt and nxt[0] in _PUNCT:
            return side
    return None


def extract_explanation(raw: str) -> str:
    m = re.search(r"explanation\s*:(.*?)(?:answer\s*:|$)", raw, re.IGNORECASE | re.DOTALL)
    return m.group(1).strip() if m else ""


# -- backends -----------------------------------------------------------------

class OracleError(RuntimeError):
    """Transport-level failure; carries the query that could not be answered."""

    def __init__(self, message: str, query: Optional[LinkQuery] = None):
        super().__init__(message)
        self.query = query


class CompletionClient:
    """Minimal HTTP client for a completion endpoint, temperature pinned to 0."""

    def __init__(
        self,
        url: str,
        model: str,
        retries: int = 3,
        timeout: float = 120.0,
        payload_style: str = "prompt",
        response_path: Optional[str] = None,
        max_tokens: int = 512,
        api_key: Optional[str] = None,
        backoff: float = 1.0,
    ):
        if payload_style not in ("prompt", "messages"):
            raise ValueError(f"unknown payload style: {payload_style}")
        self.url = url
        self.model = model
        self.retries = retries
        self.timeout = timeout
        self.payload_style = payload_style
        self.response_path = response_path or (
            "choices.0.text" if payload_style == "prompt" else "choices.0.message.content"
        )
        self.max_tokens = max_tokens
        self.backoff = backoff
        self.request_count = 0
        self._session = requests.Session()
        if api_key:
            self._session.headers["Authorization"] = f"Bearer {api_key}"

    def _payload(self, prompt: str) -> dict:
        body = {"model": self.model, "temperature": 0, "max_tokens": self.max_tokens}
        if self.payload_style == "prompt":
            body["prompt"] = prompt
        else:
            body["messages"] = [{"role": "user", "content": prompt}]
        return body

    def complete(self, prompt: str) -> str:
        last_error: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            try:
                self.request_count += 1
                resp = self._session.post(
                    self.url, json=self._payload(prompt), timeout=self.timeout
                )
                resp.raise_for_status()
                return self._extract(resp.json())
            except (requests.RequestException, ValueError, KeyError, IndexError) as err:
                last_error = err
                logger.warning("completion attempt %d failed: %s", attempt + 1, err)
        raise OracleError(f"endpoint failed after {self.retries + 1} attempts: {last_error}")

    def _extract(self, payload) -> str:
        node = payload
        for part in self.response_path.split("."):
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node[part]
        if not isinstance(node, str):
            raise ValueError(f"completion text at {self.response_path} is not a string")
        return node


class LiveBackend:
    """Asks the completion endpoint with the frozen prompt."""

    def __init__(self, client: CompletionClient):
        self.client = client
        self.model_name = client.model

    def classify(self, query: LinkQuery) -> OracleResponse:
        prompt = build_prompt(query)
        try:
            raw = self.client.complete(prompt)
        except OracleError as err:
            raise OracleError(str(err), query) from err
        relation = parse_response(raw, query.child.label, query.parent.label)
        return OracleResponse(relation, raw, extract_explanation(raw))


_MOCK_PHRASES = {
    Relation.SUBCLASS_OF: "subclass of",
    Relation.SUPERCLASS_OF: "superclass of",
    Relation.EQUIVALENT: "equivalent to",
    Relation.IRRELEVANT: "irrelevant to",
    Relation.NO_RELATION: "None",
}


class MockBackend:
    """Deterministic verdict table keyed by (child id, parent id).

    Misses fall back to "subclass of": the identity action for every
    refinement step, which keeps fixtures minimal.
    """

    model_name = "scripted-mock"

    def __init__(
        self,
        table: Optional[Dict[Tuple[EntityId, EntityId], Relation]] = None,
        default: Relation = Relation.SUBCLASS_OF,
    ):
        self.table = dict(table or {})
        self.default = default
        self.calls = 0

    def classify(self, query: LinkQuery) -> OracleResponse:
        self.calls += 1
        relation = self.table.get((query.child.id, query.parent.id), self.default)
        raw = (
            "Response:::\n"
            "Explanation: scripted verdict.\n"
            f"Answer: ConceptA is {_MOCK_PHRASES[relation]} ConceptB"
        )
        return OracleResponse(relation, raw, "scripted verdict.")


class CachingOracle:
    """Append-only JSON-lines cache in front of any backend.

    Keys include a hash of the full prompt and the model name, so edited
    labels, descriptions or prompt text invalidate old entries.
    """

    def __init__(self, inner, path):
        self.inner = inner
        self.model_name = inner.model_name
        self.path = path
        self._lock = threading.Lock()
        self._entries: Dict[Tuple[str, str, str, str], str] = {}
        self._load()
        self._fh = open(path, "a", encoding="utf-8")

    def _load(self) -> None:
        try:
            fh = open(self.path, "r", encoding="utf-8")
        except FileNotFoundError:
            return
        with fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    key = (row["child"], row["parent"], row["prompt_sha256"], row["model"])
                    self._entries[key] = row["raw_text"]
                except (ValueError, KeyError):
                    logger.warning("skipping torn cache line in %s", self.path)

    def _key(self, query: LinkQuery, prompt: str) -> Tuple[str, str, str, str]:
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()
        return (str(query.child.id), str(query.parent.id), digest, self.model_name)

    def classify(self, query: LinkQuery) -> OracleResponse:
        prompt = build_prompt(query)
        key = self._key(query, prompt)
        with self._lock:
            raw = self._entries.get(key)
        if raw is not None:
            relation = parse_response(raw, query.child.label, query.parent.label)
            return OracleResponse(relation, raw, extract_explanation(raw))
        response = self.inner.classify(query)
        row = {
            "child": key[0],
            "parent": key[1],
            "prompt_sha256": key[2],
            "model": key[3],
            "raw_text": response.raw_text,
            "relation": response.relation.value,
        }
        with self._lock:
            self._entries[key] = response.raw_text
            self._fh.write(json.dumps(row, sort_keys=True) + "\n")
            self._fh.flush()
        return response

    def close(self) -> None:
        self._fh.close()


def classify_link(query: LinkQuery, backend) -> OracleResponse:
    return backend.classify(query)


def classify_links(
    queries: Sequence[LinkQuery], backend, max_workers: int = 1
) -> Tuple[Dict[Tuple[EntityId, EntityId], OracleResponse], List[LinkQuery]]:
    """Classify many links with bounded parallelism.

    Returns results keyed by (child id, parent id) plus the queries that
    failed at transport level; the caller picks the degrade policy.
    """
    results: Dict[Tuple[EntityId, EntityId], OracleResponse] = {}
    failures: List[LinkQuery] = []

    def run_one(q: LinkQuery):
        return q, backend.classify(q)

    if max_workers <= 1:
        for q in queries:
            try:
                results[(q.child.id, q.parent.id)] = backend.classify(q)
            except OracleError:
                failures.append(q)
        return results, failures

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for future in [pool.submit(run_one, q) for q in queries]:
            try:
                q, response = future.result()
                results[(q.child.id, q.parent.id)] = response
            except OracleError as err:
                if err.query is not None:
                    failures.append(err.query)
    failures.sort(key=lambda q: (q.child.id, q.parent.id))
    return results, failures


def load_verdict_script(path) -> Dict[Tuple[EntityId, EntityId], Relation]:
    """JSON-lines of {child, parent, relation} rows for scripted runs."""
    table: Dict[Tuple[EntityId, EntityId], Relation] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            try:
                key = (EntityId.parse(row["child"]), EntityId.parse(row["parent"]))
                table[key] = Relation(row["relation"])
            except (KeyError, ValueError) as err:
                raise ValueError(f"bad verdict row at line {lineno}: {err}") from err
    return table
