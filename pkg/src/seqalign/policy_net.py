"""Policy network for pairwise match/mismatch decisions.

Pipeline per candidate pair ``(x, y)``::

    g = GCN(embeddings)                       # shared weights over both graphs
    h = relu(W_h [g_x; g_y] + b_h)            # fusion
    I = softmax_j(g_x^T W_f g_j)[y]           # j over {y} + opponents of y
    p = softmax(W_p [h; I])                   # p[1] = match, p[0] = mismatch

All gradients are derived by hand; there is no autodiff dependency.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .kg_store import KnowledgeGraph

CHECKPOINT_MAGIC = b"SQAPOL\x00\x01"
CHECKPOINT_VERSION = 1


class PolicyError(RuntimeError):
    pass


def relu(x):
    return np.maximum(x, 0.0)


def logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


# -- parameters --------------------------------------------------------------

@dataclass
class PolicyParams:
    gcn: list[np.ndarray]
    fusion_w: np.ndarray
    fusion_b: np.ndarray
    mie_w: np.ndarray
    head_w: np.ndarray
    value_w: np.ndarray
    value_b: np.ndarray

    @classmethod
    def init(cls, dim: int, hidden: int | None = None, layers: int = 2,
             rng: np.random.Generator | int | None = 0) -> "PolicyParams":
        hidden = dim if hidden is None else hidden
        if layers < 1 or dim < 1 or hidden < 1:
            raise ValueError("dim, hidden and layers must be positive")
        rng = np.random.default_rng(rng)

        def uni(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            gcn=[uni((dim, dim), dim) for _ in range(layers)],
            fusion_w=uni((hidden, 2 * dim), 2 * dim),
            fusion_b=uni((hidden,), 2 * dim),
            mie_w=uni((dim, dim), dim),
            head_w=uni((2, hidden + 1), hidden + 1),
            value_w=uni((2 * dim,), 2 * dim),
            value_b=uni((1,), 2 * dim),
        )

    @classmethod
    def zeros(cls, dim: int, hidden: int, layers: int) -> "PolicyParams":
        return cls(
            gcn=[np.zeros((dim, dim)) for _ in range(layers)],
            fusion_w=np.zeros((hidden, 2 * dim)),
            fusion_b=np.zeros(hidden),
            mie_w=np.zeros((dim, dim)),
            head_w=np.zeros((2, hidden + 1)),
            value_w=np.zeros(2 * dim),
            value_b=np.zeros(1),
        )

    @property
    def dim(self) -> int:
        return self.mie_w.shape[0]

    @property
    def hidden(self) -> int:
        return self.fusion_w.shape[0]

    @property
    def layers(self) -> int:
        return len(self.gcn)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"gcn.{i}", w) for i, w in enumerate(self.gcn)]
        out += [("fusion_w", self.fusion_w), ("fusion_b", self.fusion_b), ("mie_w", self.mie_w),
                ("head_w", self.head_w), ("value_w", self.value_w), ("value_b", self.value_b)]
        return out

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            gcn=[w.copy() for w in self.gcn], fusion_w=self.fusion_w.copy(),
            fusion_b=self.fusion_b.copy(), mie_w=self.mie_w.copy(), head_w=self.head_w.copy(),
            value_w=self.value_w.copy(), value_b=self.value_b.copy())

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams.zeros(self.dim, self.hidden, self.layers)

    def add_(self, other: "PolicyParams", scale: float = 1.0) -> "PolicyParams":
        for (_, a), (_, b) in zip(self.named_tensors(), other.named_tensors()):
            a += scale * b
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t * t)) for _, t in self.named_tensors())))

    def check_finite(self) -> None:
        for name, t in self.named_tensors():
            if not np.all(np.isfinite(t)):
                raise PolicyError(f"non-finite values in {name}")

    def equals(self, other: "PolicyParams") -> bool:
        a, b = self.named_tensors(), other.named_tensors()
        return len(a) == len(b) and all(
            n1 == n2 and t1.shape == t2.shape and np.array_equal(t1, t2) for (n1, t1), (n2, t2) in zip(a, b))


# -- graph encoder -----------------------------------------------------------

@dataclass
class GraphEncoding:
    """Full-graph GCN forward pass with the intermediates needed for backprop."""

    agg: sp.csr_matrix
    inputs: list[np.ndarray]        # A @ H_{k-1}, per layer
    preacts: list[np.ndarray]       # (A @ H_{k-1}) @ W_k^T, per layer
    output: np.ndarray

    def backward(self, d_out: np.ndarray, weights: Sequence[np.ndarray]) -> list[np.ndarray]:
        grads = [np.zeros_like(w) for w in weights]
        d_h = d_out
        for k in reversed(range(len(weights))):
            d_z = d_h * (self.preacts[k] > 0)
            grads[k] = d_z.T @ self.inputs[k]
            if k > 0:
                d_h = self.agg.T @ (d_z @ weights[k])
        return grads


def encode_graph(agg: sp.csr_matrix, embeddings: np.ndarray, weights: Sequence[np.ndarray]) -> GraphEncoding:
    h = np.asarray(embeddings, dtype=np.float64)
    inputs, preacts = [], []
    for w in weights:
        p = agg @ h
        z = p @ w.T
        inputs.append(p)
        preacts.append(z)
        h = relu(z)
    return GraphEncoding(agg, inputs, preacts, h)


def gcn_encode(kg: KnowledgeGraph, embeddings: np.ndarray, params: PolicyParams, e: int) -> np.ndarray:
    """Final-layer GCN vector of a single entity."""
    if not 0 <= e < kg.num_entities:
        raise KeyError(f"unknown entity id {e}")
    if params.layers < 1:
        raise ValueError("at least one GCN layer required")
    return encode_graph(kg.aggregation_matrix(), embeddings, params.gcn).output[e].copy()


@dataclass
class Encodings:
    """Both graphs encoded under one frozen parameter snapshot (one per episode)."""

    g1: GraphEncoding
    g2: GraphEncoding

    @classmethod
    def compute(cls, agg1, emb1, agg2, emb2, params: PolicyParams) -> "Encodings":
        return cls(encode_graph(agg1, emb1, params.gcn), encode_graph(agg2, emb2, params.gcn))


# -- per-state forward / backward -------------------------------------------

@dataclass
class StateFeatures:
    gx: np.ndarray
    gy: np.ndarray
    opponents: np.ndarray
    source: int | None = None
    target: int | None = None
    opponent_ids: tuple[int, ...] = ()
    encodings: Encodings | None = field(default=None, repr=False)
    _cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.opponents = np.asarray(self.opponents, dtype=np.float64).reshape(-1, len(self.gx))


@dataclass(frozen=True)
class ActionDistribution:
    p_mismatch: float
    p_match: float

    def __getitem__(self, action: int) -> float:
        return self.p_match if action == 1 else self.p_mismatch

    def greedy(self) -> int:
        return 1 if self.p_match > self.p_mismatch else 0


def state_features(enc: Encodings, source: int, target: int, opponent_ids: Sequence[int]) -> StateFeatures:
    opp = tuple(int(o) for o in opponent_ids)
    return StateFeatures(
        gx=enc.g1.output[source], gy=enc.g2.output[target],
        opponents=enc.g2.output[list(opp)] if opp else np.zeros((0, enc.g2.output.shape[1])),
        source=source, target=target, opponent_ids=opp, encodings=enc)


def fuse(gx, gy, params: PolicyParams) -> np.ndarray:
    x = np.concatenate([gx, gy])
    return relu(params.fusion_w @ x + params.fusion_b)


def density_ratio(gx, gy, params: PolicyParams) -> float:
    with np.errstate(over="ignore"):
        return float(np.exp(gx @ params.mie_w @ gy))


def mie_scores(gx, gy, opponents, params: PolicyParams) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns (I, log-density-ratios, softmax weights); index 0 is the candidate itself."""
    cands = np.vstack([gy[None, :], np.asarray(opponents).reshape(-1, len(gy))])
    s = cands @ (params.mie_w.T @ gx)
    q = np.exp(s - logsumexp(s))
    return float(q[0]), s, q


def mie_score(gx, gy, opponents, params: PolicyParams) -> float:
    return mie_scores(gx, gy, opponents, params)[0]


def value_estimate(gx, gy, params: PolicyParams) -> float:
    return float(params.value_w @ np.concatenate([gx, gy]) + params.value_b[0])


def forward(state: StateFeatures, params: PolicyParams, use_mie: bool = True) -> ActionDistribution:
    x = np.concatenate([state.gx, state.gy])
    pre = params.fusion_w @ x + params.fusion_b
    h = relu(pre)
    if use_mie:
        mie, _, q = mie_scores(state.gx, state.gy, state.opponents, params)
    else:
        mie, q = 0.0, None
    u = np.append(h, mie)
    z = params.head_w @ u
    p = softmax(z)
    state._cache = {"x": x, "pre": pre, "u": u, "p": p, "q": q, "mie": mie, "use_mie": use_mie}
    return ActionDistribution(float(p[0]), float(p[1]))


def _head_backward(state: StateFeatures, action: int, params: PolicyParams, grads: PolicyParams,
                   weight: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adds ``weight * d ln pi(action)`` for the non-GCN tensors into ``grads``.

    Returns gradients with respect to ``gx``, ``gy`` and the opponent rows.
    """
    c = state._cache
    if c is None:
        raise PolicyError("log_prob_grad called before forward on this state")
    dim = len(state.gx)
    dz = -c["p"].copy()
    dz[action] += 1.0
    dz *= weight
    grads.head_w += np.outer(dz, c["u"])
    du = params.head_w.T @ dz
    dpre = du[:-1] * (c["pre"] > 0)
    grads.fusion_w += np.outer(dpre, c["x"])
    grads.fusion_b += dpre
    dx = params.fusion_w.T @ dpre
    dgx, dgy = dx[:dim].copy(), dx[dim:].copy()
    dopp = np.zeros_like(state.opponents)
    if c["use_mie"]:
        q, mie = c["q"], c["mie"]
        # d I / d s_j = I * ([j == 0] - q_j)
        cj = -du[-1] * mie * q
        cj[0] += du[-1] * mie
        cands = np.vstack([state.gy[None, :], state.opponents])
        weighted = cj @ cands
        grads.mie_w += np.outer(state.gx, weighted)
        dgx += params.mie_w @ weighted
        back = params.mie_w.T @ state.gx
        dgy += cj[0] * back
        dopp += np.outer(cj[1:], back)
    return dgx, dgy, dopp


def accumulate_log_prob_grads(states: Sequence[StateFeatures], actions: Sequence[int],
                              weights: Sequence[float], params: PolicyParams) -> PolicyParams:
    """``sum_i weights[i] * grad ln pi(actions[i] | states[i])`` over all policy tensors.

    States that reference the same :class:`Encodings` share one GCN backward pass.
    """
    grads = params.zeros_like()
    pending: dict[int, tuple[Encodings, np.ndarray, np.ndarray]] = {}
    for state, action, w in zip(states, actions, weights):
        dgx, dgy, dopp = _head_backward(state, int(action), params, grads, float(w))
        enc = state.encodings
        if enc is None or state.source is None or state.target is None:
            raise PolicyError("state lacks encoder provenance; build it with state_features()")
        key = id(enc)
        if key not in pending:
            pending[key] = (enc, np.zeros_like(enc.g1.output), np.zeros_like(enc.g2.output))
        _, d1, d2 = pending[key]
        d1[state.source] += dgx
        d2[state.target] += dgy
        for j, o in enumerate(state.opponent_ids):
            d2[o] += dopp[j]
    for enc, d1, d2 in pending.values():
        for k, (a, b) in enumerate(zip(enc.g1.backward(d1, params.gcn), enc.g2.backward(d2, params.gcn))):
            grads.gcn[k] += a + b
    return grads


def log_prob_grad(state: StateFeatures, action: int, params: PolicyParams) -> PolicyParams:
    """Exact gradient of ``ln pi(action | state)``; value-head entries are zero."""
    return accumulate_log_prob_grads([state], [action], [1.0], params)


# -- policy wrapper ----------------------------------------------------------

class Policy:
    """Parameters plus the frozen graph context the agent acts in."""

    def __init__(self, params: PolicyParams, use_mie: bool = True):
        self.params = params
        self.use_mie = use_mie
        self._graphs: tuple | None = None
        self._encodings: Encodings | None = None

    def bind(self, kg1: KnowledgeGraph, emb1: np.ndarray, kg2: KnowledgeGraph, emb2: np.ndarray) -> "Policy":
        if emb1.shape[1] != self.params.dim or emb2.shape[1] != self.params.dim:
            raise PolicyError(f"embedding dim {emb1.shape[1]} does not match policy dim {self.params.dim}")
        self._graphs = (kg1.aggregation_matrix(), emb1, kg2.aggregation_matrix(), emb2)
        self._encodings = None
        return self

    def refresh(self) -> Encodings:
        """Recompute graph encodings; call after each parameter update."""
        if self._graphs is None:
            raise PolicyError("policy not bound to graphs")
        a1, e1, a2, e2 = self._graphs
        self._encodings = Encodings.compute(a1, e1, a2, e2, self.params)
        return self._encodings

    @property
    def encodings(self) -> Encodings:
        return self._encodings if self._encodings is not None else self.refresh()

    def state(self, source: int, target: int, opponent_ids: Sequence[int]) -> StateFeatures:
        return state_features(self.encodings, source, target, opponent_ids)

    def distribution(self, state: StateFeatures) -> ActionDistribution:
        return forward(state, self.params, self.use_mie)

    def value(self, state: StateFeatures) -> float:
        return value_estimate(state.gx, state.gy, self.params)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: PolicyParams, seed: int | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<IIII", CHECKPOINT_VERSION, params.dim, params.hidden, params.layers)
    tensors = params.named_tensors()
    buf += struct.pack("<I", len(tensors))
    for name, t in tensors:
        label = name.encode("utf-8")
        buf += struct.pack("<H", len(label)) + label
        buf += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t, dtype="<f8").tobytes()
    path.write_bytes(bytes(buf))
    sidecar = {"version": CHECKPOINT_VERSION, "dim": params.dim, "hidden": params.hidden,
               "layers": params.layers, "seed": seed,
               "shapes": {name: list(t.shape) for name, t in tensors}}
    if extra:
        sidecar.update(extra)
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise PolicyError(f"{path}: not a policy checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, dim, hidden, layers = struct.unpack_from("<IIII", data, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise PolicyError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    params = PolicyParams(
        gcn=[tensors[f"gcn.{i}"] for i in range(layers)], fusion_w=tensors["fusion_w"],
        fusion_b=tensors["fusion_b"], mie_w=tensors["mie_w"], head_w=tensors["head_w"],
        value_w=tensors["value_w"], value_b=tensors["value_b"])
    if (params.dim, params.hidden) != (dim, hidden):
        raise PolicyError(f"{path}: header shape does not match tensors")
    meta = {}
    side = _sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
    return params, meta
