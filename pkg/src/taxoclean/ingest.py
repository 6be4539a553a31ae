"""Single-pass streaming reader for truthy N-Triples dumps.

Only six predicates matter to the pipeline: the direct claims P31 (typing),
P279 (subclassing) and P106 (occupation), English rdfs labels, schema.org
descriptions, and schema.org `about` links from English Wikipedia pages.
Everything else is skipped without being parsed in full.
"""
from __future__ import annotations

import gzip
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Iterator, NamedTuple, Optional, Set, Tuple, Union

from .ids import ITEM, EntityId

logger = logging.getLogger(__name__)

_ENTITY_PREFIX = "http://www.wikidata.org/entity/"
_DIRECT_PROP_PREFIX = "http://www.wikidata.org/prop/direct/"
_LABEL_IRI = "http://www.w3.org/2000/01/rdf-schema#label"
_DESCRIPTION_IRI = "http://schema.org/description"
_ABOUT_IRI = "http://schema.org/about"
_ENWIKI_PREFIX = "https://en.wikipedia.org/wiki/"

SNAPSHOT_MAGIC = b"TFSTORE1"
SNAPSHOT_VERSION = 1


class Predicate(Enum):
    INSTANCE_OF = "P31"
    SUBCLASS_OF = "P279"
    OCCUPATION = "P106"
    LABEL = "label"
    DESCRIPTION = "description"
    SITELINK = "sitelink"


_DIRECT_CLAIMS = {
    "P31": Predicate.INSTANCE_OF,
    "P279": Predicate.SUBCLASS_OF,
    "P106": Predicate.OCCUPATION,
}


class TripleRecord(NamedTuple):
    subject: EntityId
    predicate: Predicate
    value: Union[EntityId, Tuple[str, str]]


class LineParseError(ValueError):
    """A structurally broken line (unterminated IRI or literal)."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        super().__init__(message)
        self.line_number = line_number


def _read_iri(line: str, start: int) -> Tuple[str, int]:
    """Return the IRI starting at `start` (which must point at '<')."""
    end = line.find(">", start + 1)
    if end < 0:
        raise LineParseError("unterminated IRI")
    iri = line[start + 1 : end]
    # IRIs never carry whitespace or '<'; seeing one means a '>' went missing
    if "<" in iri or " " in iri or "\t" in iri:
        raise LineParseError("unterminated IRI")
    return iri, end + 1


def _unescape_literal(text: str) -> str:
    if "\\" not in text:
        return text
    out = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= n:
            raise LineParseError("dangling escape in literal")
        nxt = text[i + 1]
        if nxt in '"\\':
            out.append(nxt)
            i += 2
        elif nxt == "t":
            out.append("\t")
            i += 2
        elif nxt == "n":
            out.append("\n")
            i += 2
        elif nxt == "r":
            out.append("\r")
            i += 2
        elif nxt == "u" or nxt == "U":
            width = 4 if nxt == "u" else 8
            hexpart = text[i + 2 : i + 2 + width]
            if len(hexpart) != width:
                raise LineParseError("truncated unicode escape in literal")
            out.append(chr(int(hexpart, 16)))
            i += 2 + width
        else:
            out.append(nxt)
            i += 2
    return "".join(out)


def _read_literal(line: str, start: int) -> Tuple[str, str, int]:
    """Return (text, language-tag, next index) for the literal at `start`."""
    i = start + 1
    n = len(line)
    while i < n:
        ch = line[i]
        if ch == "\\":
            i += 2
            continue
        if ch == '"':
            break
        i += 1
    else:
        raise LineParseError("unterminated literal")
    text = _unescape_literal(line[start + 1 : i])
    i += 1
    lang = ""
    if i < n and line[i] == "@":
        j = i + 1
        while j < n and (line[j].isalnum() or line[j] == "-"):
            j += 1
        lang = line[i + 1 : j]
        i = j
    return text, lang, i


def _entity_from_iri(iri: str) -> Optional[EntityId]:
    if not iri.startswith(_ENTITY_PREFIX):
        return None
    tail = iri[len(_ENTITY_PREFIX) :]
    try:
        return EntityId.parse(tail)
    except ValueError:
        return None


def parse_line(line: str) -> Optional[TripleRecord]:
    """Parse one dump line; return None for well-formed lines we do not track.

    Raises LineParseError on structural breakage (unterminated IRI/literal).
    """
    line = line.strip()
    if not line or line.startswith("#"):
        return None
    if not line.startswith("<"):
        # blank-node or otherwise non-IRI subject: nothing we track
        return None
    subject_iri, pos = _read_iri(line, 0)
    pos = _skip_ws(line, pos)
    if pos >= len(line) or line[pos] != "<":
        raise LineParseError("missing predicate IRI")
    predicate_iri, pos = _read_iri(line, pos)
    pos = _skip_ws(line, pos)

    subject = _entity_from_iri(subject_iri)
    if subject is None:
        # English Wikipedia page linking back to its entity
        if subject_iri.startswith(_ENWIKI_PREFIX) and predicate_iri == _ABOUT_IRI:
            if pos >= len(line) or line[pos] != "<":
                raise LineParseError("about line lacks an object IRI")
            object_iri, _ = _read_iri(line, pos)
            entity = _entity_from_iri(object_iri)
            if entity is None or entity.namespace != ITEM:
                return None
            return TripleRecord(entity, Predicate.SITELINK, (subject_iri, "en"))
        return None
    if subject.namespace != ITEM:
        return None

    if predicate_iri.startswith(_DIRECT_PROP_PREFIX):
        prop = predicate_iri[len(_DIRECT_PROP_PREFIX) :]
        predicate = _DIRECT_CLAIMS.get(prop)
        if predicate is None:
            return None
        if pos >= len(line) or line[pos] != "<":
            # e.g. somevalue encoded as a blank node; nothing to record
            return None
        object_iri, _ = _read_iri(line, pos)
        target = _entity_from_iri(object_iri)
        if target is None or target.namespace != ITEM:
            return None
        return TripleRecord(subject, predicate, target)

    if predicate_iri == _LABEL_IRI or predicate_iri == _DESCRIPTION_IRI:
        if pos >= len(line) or line[pos] != '"':
            return None
        text, lang, _ = _read_literal(line, pos)
        if not lang:
            return None
        kind = Predicate.LABEL if predicate_iri == _LABEL_IRI else Predicate.DESCRIPTION
        return TripleRecord(subject, kind, (text, lang))

    return None


def _skip_ws(line: str, pos: int) -> int:
    n = len(line)
    while pos < n and line[pos] in " \t":
        pos += 1
    return pos


# -- aggregation --------------------------------------------------------------

@dataclass
class EntityRecord:
    label: Optional[str] = None
    description: Optional[str] = None
    instance_of: Set[EntityId] = field(default_factory=set)
    occupations: Set[EntityId] = field(default_factory=set)
    subclass_of: Set[EntityId] = field(default_factory=set)
    has_wikipedia: bool = False

    def merge(self, other: "EntityRecord") -> None:
        self.label = _merge_text(self.label, other.label)
        self.description = _merge_text(self.description, other.description)
        self.instance_of |= other.instance_of
        self.occupations |= other.occupations
        self.subclass_of |= other.subclass_of
        self.has_wikipedia = self.has_wikipedia or other.has_wikipedia


def _merge_text(a: Optional[str], b: Optional[str]) -> Optional[str]:
    # min() keeps the merge commutative when a dump carries conflicting text
    if a is None:
        return b
    if b is None:
        return a
    return min(a, b)


class EntityStore:
    """Aggregated dump facts: full records for taxonomy-relevant entities plus
    per-class direct-instance counters deduplicated by subject."""

    def __init__(self):
        self.records: Dict[EntityId, EntityRecord] = {}
        self._instance_subjects: Dict[EntityId, Set[int]] = {}
        self.parse_errors: int = 0

    def record(self, entity: EntityId) -> Optional[EntityRecord]:
        return self.records.get(entity)

    def direct_instance_count(self, cls: EntityId) -> int:
        return len(self._instance_subjects.get(cls, ()))

    def counted_classes(self) -> Set[EntityId]:
        return set(self._instance_subjects)

    def typed_subjects(self) -> Set[EntityId]:
        """Every subject that carried a typing (P31/P106) claim."""
        out: Set[EntityId] = set()
        for subjects in self._instance_subjects.values():
            out.update(EntityId(ITEM, n) for n in subjects)
        return out

    def typing_of_class(self, cls: EntityId) -> Set[EntityId]:
        return {EntityId(ITEM, n) for n in self._instance_subjects.get(cls, ())}

    def typing_map(self) -> Dict[EntityId, Set[EntityId]]:
        """Invert the counters into instance -> classes."""
        out: Dict[EntityId, Set[EntityId]] = {}
        for cls, subjects in self._instance_subjects.items():
            for n in subjects:
                out.setdefault(EntityId(ITEM, n), set()).add(cls)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, EntityStore):
            return NotImplemented
        return (
            self.records == other.records
            and self._instance_subjects == other._instance_subjects
        )


def merge_stores(a: EntityStore, b: EntityStore) -> EntityStore:
    """Commutative, associative merge of partial stores."""
    out = EntityStore()
    for source in (a, b):
        for entity, rec in source.records.items():
            mine = out.records.setdefault(entity, EntityRecord())
            mine.merge(rec)
        for cls, subjects in source._instance_subjects.items():
            out._instance_subjects.setdefault(cls, set()).update(subjects)
        out.parse_errors += source.parse_errors
    return out


class StoreBuilder:
    """Accumulates triple records into an EntityStore.

    In buffering mode (the default) every entity touched by a label,
    description, sitelink or typing line keeps a provisional record until
    finalize() decides retention. When `restrict_to` is given, only those
    entities (plus the watch set) ever get a record, which keeps memory
    proportional to the class set on dump-scale inputs.
    """

    def __init__(self, watch_set: Iterable[EntityId] = (), restrict_to: Optional[Set[EntityId]] = None):
        self.store = EntityStore()
        self.watch = set(watch_set)
        self.restrict = restrict_to
        self._retained: Set[EntityId] = set(self.watch)

    def _rec(self, entity: EntityId) -> Optional[EntityRecord]:
        if self.restrict is not None and entity not in self.restrict and entity not in self.watch:
            return None
        return self.store.records.setdefault(entity, EntityRecord())

    def add(self, record: TripleRecord) -> None:
        subject, predicate, value = record
        if predicate is Predicate.SUBCLASS_OF:
            assert isinstance(value, EntityId)
            rec = self._rec(subject)
            if rec is not None:
                rec.subclass_of.add(value)
            self._retained.add(subject)
            self._retained.add(value)
            self._rec(value)
        elif predicate is Predicate.INSTANCE_OF or predicate is Predicate.OCCUPATION:
            assert isinstance(value, EntityId)
            self.store._instance_subjects.setdefault(value, set()).add(subject.number)
            rec = self._rec(subject)
            if rec is not None:
                if predicate is Predicate.INSTANCE_OF:
                    rec.instance_of.add(value)
                else:
                    rec.occupations.add(value)
            if predicate is Predicate.INSTANCE_OF:
                self._retained.add(value)
                self._rec(value)
        elif predicate is Predicate.LABEL:
            text, lang = value
            if lang != "en":
                return
            rec = self._rec(subject)
            if rec is not None:
                rec.label = _merge_text(rec.label, text)
        elif predicate is Predicate.DESCRIPTION:
            text, lang = value
            if lang != "en":
                return
            rec = self._rec(subject)
            if rec is not None:
                rec.description = _merge_text(rec.description, text)
        elif predicate is Predicate.SITELINK:
            rec = self._rec(subject)
            if rec is not None:
                rec.has_wikipedia = True

    def retained_set(self) -> Set[EntityId]:
        return set(self._retained)

    def finalize(self) -> EntityStore:
        if self.restrict is None:
            keep = self._retained
            self.store.records = {
                e: r for e, r in self.store.records.items() if e in keep
            }
        return self.store


def ingest(lines: Iterable[str], watch_set: Iterable[EntityId] = ()) -> EntityStore:
    """Aggregate a stream of dump lines into an EntityStore in one pass.

    Per-line parse errors are counted on the store and do not stop the stream.
    """
    builder = StoreBuilder(watch_set)
    _feed(builder, lines)
    return builder.finalize()


def _feed(builder: StoreBuilder, lines: Iterable[str]) -> int:
    count = 0
    for lineno, line in enumerate(lines, 1):
        count = lineno
        try:
            record = parse_line(line)
        except LineParseError as err:
            err.line_number = lineno
            builder.store.parse_errors += 1
            logger.warning("line %d: %s", lineno, err)
            continue
        if record is not None:
            builder.add(record)
        if lineno % 5_000_000 == 0:
            logger.info("ingested %d lines", lineno)
    return count


def open_dump(path) -> Iterator[str]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for line in fh:
            yield line


def ingest_path(path, watch_set: Iterable[EntityId] = ()) -> EntityStore:
    """Two-phase ingest of a dump file: a structure pass discovers which
    entities deserve full records, a second pass collects them.

    Produces exactly the same store as ingest() over the same lines while
    keeping memory proportional to the retained set.
    """
    first = StoreBuilder(watch_set, restrict_to=set())
    _feed(first, open_dump(path))
    retained = first.retained_set()

    second = StoreBuilder(watch_set, restrict_to=retained)
    _feed(second, open_dump(path))
    second.store.parse_errors = first.store.parse_errors
    return second.finalize()


# -- snapshot -----------------------------------------------------------------

def save_store(store: EntityStore, path) -> None:
    payload = {
        "records": {
            str(e): {
                "label": r.label,
                "description": r.description,
                "instance_of": sorted(str(x) for x in r.instance_of),
                "occupations": sorted(str(x) for x in r.occupations),
                "subclass_of": sorted(str(x) for x in r.subclass_of),
                "has_wikipedia": r.has_wikipedia,
            }
            for e, r in sorted(store.records.items())
        },
        "instance_subjects": {
            str(c): sorted(s) for c, s in sorted(store._instance_subjects.items())
        },
        "parse_errors": store.parse_errors,
    }
    blob = gzip.compress(
        json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
    )
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(bytes([SNAPSHOT_VERSION]))
        fh.write(blob)


def load_store(path) -> EntityStore:
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError("not a store snapshot (bad magic)")
        version = fh.read(1)
        if not version or version[0] != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version: {version!r}")
        payload = json.loads(gzip.decompress(fh.read()).decode("utf-8"))
    store = EntityStore()
    for key, raw in payload["records"].items():
        store.records[EntityId.parse(key)] = EntityRecord(
            label=raw["label"],
            description=raw["description"],
            instance_of={EntityId.parse(x) for x in raw["instance_of"]},
            occupations={EntityId.parse(x) for x in raw["occupations"]},
            subclass_of={EntityId.parse(x) for x in raw["subclass_of"]},
            has_wikipedia=raw["has_wikipedia"],
        )
    for key, subjects in payload["instance_subjects"].items():
        store._instance_subjects[EntityId.parse(key)] = set(subjects)
    store.parse_errors = payload["parse_errors"]
    return store
