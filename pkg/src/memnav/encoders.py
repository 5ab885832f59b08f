"""Deterministic stand-ins for a unified multi-modal encoder.

Both encoders produce L2-normalized float32 vectors of a fixed dimension and
are pure functions of their input plus the construction seed, which keeps
every retrieval result reproducible. `HashEncoder` scatters token hashes into
pseudo-random directions (good for exercising the retrieval math).
`SemanticEncoder` additionally maps a known gridworld vocabulary onto a fixed
orthonormal basis so that captions and renders of the same things actually
land near each other in embedding space.
"""

from __future__ import annotations

import hashlib
import re
from typing import Protocol, runtime_checkable

import numpy as np

_TOKEN_RE = re.compile(r"[a-z0-9.]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _hash_seed(token: str, salt: int) -> int:
    digest = hashlib.blake2b(f"{salt}:{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _unit(v: np.ndarray) -> np.ndarray:
    out = np.asarray(v, dtype=np.float32)
    n = float(np.linalg.norm(out))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    out = out / n
    # renormalize after the float32 division so the stored norm is 1 +- 1e-7
    return out / np.float32(np.linalg.norm(out))


@runtime_checkable
class Encoder(Protocol):
    """Unified encoder contract: deterministic unit vectors of dimension `dim`."""

    dim: int

    def encode_text(self, text: str) -> np.ndarray: ...

    def encode_image(self, rgb: np.ndarray) -> np.ndarray: ...


class HashEncoder:
    """Seeded pseudo-random projection of token hashes."""

    def __init__(self, dim: int = 768, seed: int = 0):
        if dim < 2:
            raise ValueError("encoder dimension must be >= 2")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _token_vec(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            rng = np.random.default_rng(_hash_seed(token, self.seed))
            vec = rng.standard_normal(self.dim).astype(np.float32)
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def encode_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return self._token_vec("<empty>")
        acc = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            acc += self._token_vec(tok)
        if np.linalg.norm(acc) < 1e-12:
            acc = self._token_vec("<degenerate>").astype(np.float64)
        return _unit(acc)

    def encode_image(self, rgb: np.ndarray) -> np.ndarray:
        digest = hashlib.blake2b(
            np.ascontiguousarray(rgb, dtype=np.uint8).tobytes(), digest_size=8
        ).hexdigest()
        return self._token_vec(f"<img:{digest}>")


# Flat object colors shared with the simulator, plus the fixed render colors
# for structure. Shared here so image and text embeddings agree on what
# "yellow" means.
COLOR_RGB = {
    "white": (235, 235, 235),
    "yellow": (220, 200, 40),
    "red": (200, 50, 50),
    "blue": (60, 90, 200),
    "green": (60, 170, 80),
    "brown": (140, 90, 50),
    "black": (20, 20, 20),
}
WALL_RGB = (185, 175, 160)
FLOOR_RGB = (105, 105, 110)

DEFAULT_VOCABULARY = (
    list(COLOR_RGB)
    + ["sofa", "table", "chair", "bed", "lamp", "plant", "shelf", "cabinet",
       "counter", "window", "door", "apple",
       "living", "media", "kitchen", "dining", "study", "bedroom", "hallway",
       "room", "wall", "floor", "large", "small", "wooden", "fabric"]
)


class SemanticEncoder:
    """Hash encoder plus a fixed orthonormal basis for known scene vocabulary.

    Vocabulary tokens contribute full-weight basis directions; everything
    else falls back to down-weighted hash noise. Images are encoded from
    their color histogram against the shared palette, which gives captions
    and renders of the same object a similarity that is actually meaningful.
    """

    NOISE_WEIGHT = 0.2

    def __init__(self, dim: int = 768, seed: int = 0,
                 vocabulary: list[str] | None = None):
        vocab = list(dict.fromkeys(vocabulary or DEFAULT_VOCABULARY))
        if dim < len(vocab) + 2:
            raise ValueError(f"dim {dim} too small for vocabulary of {len(vocab)}")
        self.dim = dim
        self.seed = seed
        self._noise = HashEncoder(dim=dim, seed=seed + 7919)
        rng = np.random.default_rng(seed)
        gauss = rng.standard_normal((dim, len(vocab)))
        q, _ = np.linalg.qr(gauss)
        self._basis = {tok: q[:, i].astype(np.float32) for i, tok in enumerate(vocab)}
        self._palette = dict(COLOR_RGB)
        self._palette["wall"] = WALL_RGB
        self._palette["floor"] = FLOOR_RGB

    def _token_vec(self, token: str) -> np.ndarray:
        vec = self._basis.get(token)
        if vec is not None:
            return vec
        return self.NOISE_WEIGHT * self._noise._token_vec(token)

    def encode_text(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return _unit(self._noise._token_vec("<empty>"))
        acc = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            acc += self._token_vec(tok)
        if np.linalg.norm(acc) < 1e-12:
            acc = self._noise._token_vec("<degenerate>").astype(np.float64)
        return _unit(acc)

    def encode_image(self, rgb: np.ndarray) -> np.ndarray:
        img = np.asarray(rgb, dtype=np.float32).reshape(-1, 3)
        total = img.shape[0]
        acc = np.zeros(self.dim, dtype=np.float64)
        for name, ref in self._palette.items():
            # renders scale colors down with distance; match hue under the
            # best shading factor instead of raw RGB distance
            ref_v = np.array(ref, dtype=np.float32)
            scale = (img @ ref_v) / float(ref_v @ ref_v)
            scale = np.clip(scale, 0.7, 1.0)
            dist = np.linalg.norm(img - scale[:, None] * ref_v[None, :], axis=1)
            frac = float(np.count_nonzero(dist < 40.0)) / total
            if frac > 0.002:
                acc += frac * self._basis[name].astype(np.float64)
        if np.linalg.norm(acc) < 1e-12:
            acc = self._basis["black"].astype(np.float64)
        return _unit(acc)
