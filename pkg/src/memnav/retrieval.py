"""Memory retrieval: scene voting, multi-modal query fusion, entropy-gated
dynamic k, and double-gated content retrieval.

Scene retrieval happens once, on the first observation of an episode: the
store votes by cosine similarity and the most frequent scene wins. Content
retrieval fuses the observation and question embeddings, widens or narrows
its candidate set with the query entropy, and returns the top-k records that
pass both a euclidean gate and a cosine gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .memory import MemoryStore, VectorRecord


@dataclass
class RetrievalParams:
    top_k_scene: int = 5
    alpha_scene: float = 0.6
    alpha_e: float = 0.9
    alpha_s: float = 0.5
    k_min: int = 2
    beta: float = 8.0
    max_retrieval_num: int = 10

    def __post_init__(self):
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.alpha_s < 1.0:
            raise ValueError("alpha_s must be in (0, 1)")
        if not 0.0 < self.alpha_scene < 1.0:
            raise ValueError("alpha_scene must be in (0, 1)")
        if self.alpha_e < 0:
            raise ValueError("alpha_e must be >= 0")

    @classmethod
    def from_hyperparams(cls, hp) -> "RetrievalParams":
        return cls(top_k_scene=hp.top_k_scene, alpha_scene=hp.alpha_scene,
                   alpha_e=hp.alpha_e, alpha_s=hp.alpha_s, k_min=hp.k_min,
                   beta=hp.beta, max_retrieval_num=hp.max_retrieval_num)


def entropy(f: np.ndarray) -> float:
    """Normalized Shannon entropy of the magnitude distribution, in [0, 1].

    p_i = |f_i| / sum|f_j|; H = -sum p_i ln p_i / ln(dim). One-hot vectors
    score 0, uniform-magnitude vectors score 1.
    """
    mag = np.abs(np.asarray(f, dtype=np.float64).reshape(-1))
    total = mag.sum()
    if total <= 0.0 or mag.size == 0:
        raise ValueError("entropy of a zero vector is undefined")
    if mag.size == 1:
        return 0.0
    p = mag / total
    nz = p[p > 0.0]
    h = -float(np.sum(nz * np.log(nz)))
    return h / math.log(mag.size)


def fuse_query(f_obs: np.ndarray, f_text: np.ndarray) -> np.ndarray:
    """Concatenate the observation and question embeddings and renormalize.
    For unit inputs this equals the concatenation scaled by 1/sqrt(2)."""
    a = np.asarray(f_obs, dtype=np.float64).reshape(-1)
    b = np.asarray(f_text, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"modality dims differ: {a.shape[0]} vs {b.shape[0]}")
    cat = np.concatenate([a, b])
    n = np.linalg.norm(cat)
    if n == 0.0:
        raise ValueError("cannot fuse two zero vectors")
    return (cat / n).astype(np.float32)


def dynamic_k(f_q: np.ndarray, params: RetrievalParams) -> int:
    """k = ceil(k_min + beta * entropy(f_q)), clamped to [k_min, max_retrieval_num]."""
    k = math.ceil(params.k_min + params.beta * entropy(f_q))
    return max(params.k_min, min(k, params.max_retrieval_num))


def reduce_query(f_q: np.ndarray) -> np.ndarray:
    """Fold a fused 2D-dim query back to record dimension by averaging its two
    halves and renormalizing; keeps both modalities in play. Falls back to the
    text half if the halves cancel exactly."""
    q = np.asarray(f_q, dtype=np.float64).reshape(-1)
    if q.size % 2 != 0:
        raise ValueError(f"fused query length {q.size} is not even")
    half = q.size // 2
    mean = 0.5 * (q[:half] + q[half:])
    n = np.linalg.norm(mean)
    if n < 1e-12:
        mean = q[half:]
        n = np.linalg.norm(mean)
        if n < 1e-12:
            raise ValueError("degenerate fused query")
    return (mean / n).astype(np.float32)


def scene_retrieve(store: MemoryStore, f_obs: np.ndarray,
                   params: RetrievalParams) -> int | None:
    """Vote for the scene whose records look most like the first observation.

    Takes the top_k_scene records by cosine similarity with similarity above
    alpha_scene and returns the most frequent scene id among them (ties break
    to the lowest id). Returns None when nothing passes the threshold —
    the caller should start a fresh scene partition.
    """
    records = store.active_records()
    if not records:
        return None
    q = np.asarray(f_obs, dtype=np.float32).reshape(-1)
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    mat = np.stack([r.embedding for r in records])
    sims = mat @ q
    order = np.lexsort((np.array([r.index for r in records]), -sims))
    votes: dict[int, int] = {}
    for pos in order[: params.top_k_scene]:
        if sims[pos] > params.alpha_scene:
            sid = records[pos].scene_id
            votes[sid] = votes.get(sid, 0) + 1
    if not votes:
        return None
    best = max(votes.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def content_retrieve(store: MemoryStore, scene_id: int, f_q: np.ndarray,
                     params: RetrievalParams) -> list[VectorRecord]:
    """Top-k scene records passing both retrieval gates, most similar first.

    A record survives when ||f_q' - f_i|| < alpha_e * (1 + entropy(f_q)) and
    cos(f_q', f_i) > alpha_s, where f_q' is the query folded down to record
    dimension. Ties in similarity break to the lower index. k comes from
    dynamic_k, so it is never more than max_retrieval_num.
    """
    records = store.scene_records(scene_id)
    if not records:
        return []
    q = reduce_query(f_q)
    if q.shape[0] != store.dim:
        raise ValueError(f"reduced query dim {q.shape[0]} != store dim {store.dim}")
    h = entropy(f_q)
    radius = params.alpha_e * (1.0 + h)
    mat = np.stack([r.embedding for r in records]).astype(np.float64)
    qd = q.astype(np.float64)
    sims = mat @ qd
    dists = np.linalg.norm(mat - qd[None, :], axis=1)
    keep = (dists < radius) & (sims > params.alpha_s)
    if not np.any(keep):
        return []
    kept = np.flatnonzero(keep)
    idxs = np.array([records[i].index for i in kept])
    order = np.lexsort((idxs, -sims[kept]))
    k = dynamic_k(f_q, params)
    return [records[kept[pos]] for pos in order[:k]]
