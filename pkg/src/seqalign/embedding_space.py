"""Entity embeddings, projection, cosine similarity and exact k-NN candidate lists."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kg_store import KnowledgeGraph


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingSpace:
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        if self.e1.ndim != 2 or self.e2.ndim != 2 or self.e1.shape[1] != self.e2.shape[1]:
            raise EmbeddingError(f"incompatible embedding shapes {self.e1.shape} and {self.e2.shape}")
        for name, m in (("e1", self.e1), ("e2", self.e2)):
            if not np.all(np.isfinite(m)):
                raise EmbeddingError(f"{name} contains non-finite values")
        self.e1.setflags(write=False)
        self.e2.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.e1.shape[1]

    @classmethod
    def from_matrices(cls, e1, e2, projection=None) -> "EmbeddingSpace":
        e1 = np.array(e1, dtype=np.float64)
        e2 = np.array(e2, dtype=np.float64)
        if projection is not None:
            e2 = apply_projection(e2, projection)
        return cls(e1, e2)


@dataclass(frozen=True)
class CandidateTable:
    """Per-source top-k targets, most similar first (ties: smaller target id first)."""

    k: int
    rows: dict[int, tuple[tuple[int, float], ...]]

    def __len__(self) -> int:
        return len(self.rows)

    def head_similarity(self, source: int) -> float:
        return self.rows[source][0][1]

    def pairs(self):
        for s, row in self.rows.items():
            for t, sim in row:
                yield s, t, sim


# -- loading -----------------------------------------------------------------

def _vectors_from_text(lines: Iterable[str]) -> tuple[dict[str, np.ndarray], int]:
    it = iter(lines)
    header = next(it, None)
    if header is None:
        raise EmbeddingError("empty embedding source")
    try:
        count, dim = (int(x) for x in header.split())
    except ValueError:
        raise EmbeddingError(f"bad header line {header!r}, expected '<count> <dim>'") from None
    vectors: dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(it, start=2):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != dim + 1:
            raise EmbeddingError(f"line {lineno}: vector length {len(parts) - 1} != {dim}")
        try:
            vec = np.array([float(x) for x in parts[1:]], dtype=np.float64)
        except ValueError:
            raise EmbeddingError(f"line {lineno}: bad number") from None
        vectors[parts[0]] = vec
    if len(vectors) != count:
        raise EmbeddingError(f"header declares {count} vectors, found {len(vectors)}")
    return vectors, dim


def load_embeddings(vector_source, kg: KnowledgeGraph) -> np.ndarray:
    """Build a ``|E| x dim`` matrix indexed by dense id.

    ``vector_source`` is a path to a text file, an iterable of text lines, or a
    mapping from external id to vector.
    """
    if isinstance(vector_source, dict):
        vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vector_source.items()}
        lengths = {v.shape for v in vectors.values()}
        if len(lengths) != 1:
            raise EmbeddingError(f"vector length mismatch: {sorted(lengths)}")
        dim = next(iter(lengths))[0]
    else:
        if isinstance(vector_source, (str, Path)):
            vector_source = Path(vector_source).read_text(encoding="utf-8").splitlines()
        vectors, dim = _vectors_from_text(vector_source)
    out = np.empty((kg.num_entities, dim), dtype=np.float64)
    for idx, name in enumerate(kg.entities.names):
        vec = vectors.get(name)
        if vec is None:
            raise EmbeddingError(f"no embedding for entity {name!r}")
        out[idx] = vec
    if not np.all(np.isfinite(out)):
        bad = kg.entities.name(int(np.argwhere(~np.isfinite(out))[0, 0]))
        raise EmbeddingError(f"non-finite value in embedding of {bad!r}")
    return out


def load_embeddings_binary(matrix_path, ids_path, kg: KnowledgeGraph) -> np.ndarray:
    """Load the sidecar format: little-endian float32 row-major matrix + one id per line."""
    ids = Path(ids_path).read_text(encoding="utf-8").splitlines()
    ids = [i for i in ids if i]
    raw = np.fromfile(matrix_path, dtype="<f4")
    if not ids or raw.size % len(ids):
        raise EmbeddingError(f"matrix of {raw.size} floats does not split into {len(ids)} rows")
    mat = raw.reshape(len(ids), -1).astype(np.float64)
    return load_embeddings(dict(zip(ids, mat)), kg)


def save_embeddings(path, names: Sequence[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for name, row in zip(names, matrix):
            fh.write(name + " " + " ".join(repr(float(x)) for x in row) + "\n")


def save_embeddings_binary(matrix_path, ids_path, names: Sequence[str], matrix: np.ndarray) -> None:
    np.asarray(matrix, dtype="<f4").tofile(matrix_path)
    Path(ids_path).write_text("".join(n + "\n" for n in names), encoding="utf-8")


def load_matrix(path) -> np.ndarray:
    """Projection matrix text format: ``dim`` rows of ``dim`` whitespace-separated floats."""
    rows = [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    mat = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise EmbeddingError(f"projection matrix must be square, got {mat.shape}")
    return mat


def save_matrix(path, m: np.ndarray) -> None:
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in row) + "\n" for row in m),
                          encoding="utf-8")


# -- geometry ----------------------------------------------------------------

def apply_projection(e2_raw: np.ndarray, m: np.ndarray) -> np.ndarray:
    e2_raw = np.asarray(e2_raw, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or e2_raw.ndim != 2 or e2_raw.shape[1] != m.shape[0]:
        raise EmbeddingError(f"cannot project {e2_raw.shape} by {m.shape}")
    return e2_raw @ m


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise EmbeddingError(f"length mismatch {u.shape} vs {v.shape}")
    nu, nv = math.sqrt(float(u @ u)), math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine undefined for a zero-norm vector")
    return min(1.0, max(-1.0, float(u @ v) / (nu * nv)))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise EmbeddingError("cosine undefined for a zero-norm vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def build_candidates(space: EmbeddingSpace, sources: Sequence[int], targets: Sequence[int],
                     k: int = 10) -> CandidateTable:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(sources) == 0 or len(targets) == 0:
        raise ValueError("sources and targets must be non-empty")
    src = np.asarray(sources, dtype=np.int64)
    tgt = np.asarray(sorted(set(int(t) for t in targets)), dtype=np.int64)
    sims = cosine_matrix(space.e1[src], space.e2[tgt])
    kk = min(k, len(tgt))
    rows = {}
    for i, s in enumerate(src):
        # lexsort: last key is primary -> similarity desc, then target id asc
        order = np.lexsort((tgt, -sims[i]))[:kk]
        rows[int(s)] = tuple((int(tgt[j]), float(sims[i, j])) for j in order)
    return CandidateTable(kk, rows)
