"""Knowledge graph loading and indexing.

Triple files follow the OpenEA ``rel_triples`` layout (``head<TAB>relation<TAB>tail``),
alignment files the ``ent_links`` layout (``ent1<TAB>ent2``).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp


class KGFormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class Registry:
    """Bidirectional map between external string ids and dense integer ids."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def get(self, name: str) -> int | None:
        return self._ids.get(name)

    def name(self, idx: int) -> str:
        return self._names[idx]

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Registry) and self._names == other._names


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: Registry
    relations: Registry
    triples: tuple[tuple[int, int, int], ...]
    adjacency: tuple[frozenset[int], ...]

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def neighbors(self, e: int) -> frozenset[int]:
        return neighbors(self, e)

    def aggregation_matrix(self) -> sp.csr_matrix:
        """Row-normalised ``(A + I)`` so that row ``e`` averages over ``N(e) | {e}``."""
        n = self.num_entities
        rows, cols = [], []
        for e, nbrs in enumerate(self.adjacency):
            rows.append(e)
            cols.append(e)
            for j in nbrs:
                rows.append(e)
                cols.append(j)
        counts = np.array([len(a) + 1 for a in self.adjacency], dtype=np.float64)
        vals = 1.0 / counts[np.array(rows, dtype=np.int64)]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def to_lines(self) -> list[str]:
        ent, rel = self.entities, self.relations
        return [f"{ent.name(h)}\t{rel.name(r)}\t{ent.name(t)}" for h, r, t in self.triples]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.entities == other.entities and self.relations == other.relations
                and self.triples == other.triples and self.adjacency == other.adjacency)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class AlignmentSet:
    pairs: tuple[tuple[int, int], ...]
    role: str = "test"
    _by_source: dict[int, int] = field(default_factory=dict, repr=False, compare=False)

    ROLES = ("train", "valid", "test")

    def __post_init__(self):
        if self.role not in self.ROLES:
            raise AlignmentError(f"unknown alignment role {self.role!r}")
        seen_tgt: set[int] = set()
        for s, t in self.pairs:
            if s in self._by_source:
                raise AlignmentError(f"source entity {s} aligned twice")
            if t in seen_tgt:
                raise AlignmentError(f"target entity {t} aligned twice")
            self._by_source[s] = t
            seen_tgt.add(t)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __contains__(self, pair) -> bool:
        s, t = pair
        return self._by_source.get(s) == t

    @property
    def sources(self) -> list[int]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[int]:
        return [t for _, t in self.pairs]

    def target_of(self, s: int) -> int | None:
        return self._by_source.get(s)

    def to_lines(self, g1: KnowledgeGraph, g2: KnowledgeGraph) -> list[str]:
        return [f"{g1.entities.name(s)}\t{g2.entities.name(t)}" for s, t in self.pairs]


def _as_lines(source: str | Path | TextIO | Iterable[str]) -> Iterable[str]:
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8").splitlines()
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def load_kg(triple_source: str | Path | TextIO | Iterable[str]) -> KnowledgeGraph:
    """Parse tab-separated triples.

    A ``str`` argument is treated as file content, a ``Path`` as a file to read.
    Ids are assigned in first-seen order; duplicate triples are dropped.
    """
    entities, relations = Registry(), Registry()
    triples: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int, int]] = set()
    for lineno, raw in enumerate(_as_lines(triple_source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KGFormatError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        h = entities.add(parts[0])
        r = relations.add(parts[1])
        t = entities.add(parts[2])
        if (h, r, t) not in seen:
            seen.add((h, r, t))
            triples.append((h, r, t))
    if not triples:
        raise KGFormatError("no triples found")

    adj: list[set[int]] = [set() for _ in range(len(entities))]
    for h, _, t in triples:
        # self-loops are implied by the self term of the aggregation
        if h != t:
            adj[h].add(t)
            adj[t].add(h)
    return KnowledgeGraph(entities, relations, tuple(triples), tuple(frozenset(a) for a in adj))


def load_alignment(pair_source: str | Path | TextIO | Iterable[str], g1: KnowledgeGraph,
                   g2: KnowledgeGraph, role: str = "test") -> AlignmentSet:
    pairs = []
    for lineno, raw in enumerate(_as_lines(pair_source), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise KGFormatError(f"line {lineno}: expected 2 tab-separated fields, got {len(parts)}")
        s, t = g1.entities.get(parts[0]), g2.entities.get(parts[1])
        if s is None:
            raise AlignmentError(f"line {lineno}: unknown source entity {parts[0]!r}")
        if t is None:
            raise AlignmentError(f"line {lineno}: unknown target entity {parts[1]!r}")
        pairs.append((s, t))
    return AlignmentSet(tuple(pairs), role)


def neighbors(kg: KnowledgeGraph, e: int) -> frozenset[int]:
    if not 0 <= e < kg.num_entities:
        raise KeyError(f"unknown entity id {e}")
    return kg.adjacency[e]


def write_lines(path: str | Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
