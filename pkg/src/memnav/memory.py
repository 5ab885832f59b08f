"""Hierarchical memory: entry types, the dense-vector store, and persistence.

Local entries hold one exploration step (observation handle, detections,
captions, decision, agent state). Global entries annotate the map with room
and target information. Every entry is embedded once on insert and kept in a
flat indexed library partitioned by scene; retrieval never sees superseded
records.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .encoders import Encoder, _unit
from .errors import StoreFormatError
from .geometry import Detection, Pose, compass_label

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
VECTORS_NAME = "vectors.f32"
_MAGIC = "memnav-store v1"


@dataclass
class SceneCaption:
    room: str = ""
    objects: tuple[str, ...] = ()
    description: str = ""

    def text(self) -> str:
        return (f"Room: {self.room}\n"
                f"Object: {', '.join(self.objects)}\n"
                f"Description: {self.description}")


@dataclass
class LocalMemoryEntry:
    """One step of exploration memory."""

    step: int
    observation_ref: str
    detections: list[Detection]
    scene_caption: SceneCaption
    decision: str
    state: Pose
    space_description: str = ""

    def __post_init__(self):
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")
        for det in self.detections:
            if not det.category:
                raise ValueError("detection with empty category")

    def text(self) -> str:
        """Canonical rendering: fixed-order key/value lines. Injective over
        distinct entries because step, pose and detections all appear."""
        x, y, _, yaw = self.state.as_tuple()
        lines = [
            f"step: {self.step}",
            self.scene_caption.text(),
        ]
        for det in self.detections:
            lines.append(det.text())
        lines.append(f"decision: {self.decision}")
        lines.append(f"state: position ({x:.2f}, {y:.2f}) facing "
                     f"{compass_label(np.cos(yaw), np.sin(yaw))}; {self.space_description}")
        return "\n".join(lines)


@dataclass
class GlobalMemoryEntry:
    """Map-anchored annotation: a room or a target."""

    kind: str  # "room" | "target"
    category: str
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    description: str = ""
    observer: Pose | None = None

    def __post_init__(self):
        if self.kind not in ("room", "target"):
            raise ValueError(f"global entry kind must be room|target, got {self.kind!r}")
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("non-finite global entry position")

    def text(self) -> str:
        x, y = self.position[0], self.position[1]
        if self.kind == "room":
            return f"room: {self.category} | observed from ({x:.2f}, {y:.2f})"
        ox, oy, _, oyaw = self.observer.as_tuple() if self.observer else (x, y, 0.0, 0.0)
        return (f"target: {self.category} | desc: {self.description} | "
                f"at ({x:.2f}, {y:.2f}) | observed from ({ox:.2f}, {oy:.2f}) "
                f"yaw {oyaw:.2f}")


MemoryEntry = LocalMemoryEntry | GlobalMemoryEntry


@dataclass
class VectorRecord:
    index: int
    payload: MemoryEntry
    embedding: np.ndarray  # unit-norm float32, shape (dim,)
    scene_id: int
    superseded: bool = False


def build_local_entry(observation_ref: str, detections: list[Detection],
                      scene_caption: SceneCaption | None, step: int,
                      decision: str, state: Pose,
                      space_description: str = "") -> LocalMemoryEntry:
    """Assemble a local entry; a missing caption degrades to empty fields."""
    if scene_caption is None:
        log.warning("local entry at step %d built without a scene caption", step)
        scene_caption = SceneCaption()
    return LocalMemoryEntry(
        step=step,
        observation_ref=observation_ref,
        detections=list(detections),
        scene_caption=scene_caption,
        decision=decision,
        state=state,
        space_description=space_description,
    )


class MemoryStore:
    """Indexed library of embedded memories with per-scene partitions.

    Indices are never reused, including after supersede. Concurrency contract:
    concurrent readers OR one writer.
    """

    def __init__(self, dim: int = 768):
        self.dim = dim
        self._records: dict[int, VectorRecord] = {}
        self._scenes: dict[int, list[int]] = {}
        self._next_index = 0
        self._next_scene = 0
        # runtime-only caches for the update gate; never persisted
        self._images: dict[int, np.ndarray] = {}
        self._obs_features: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._records)

    @property
    def scene_ids(self) -> list[int]:
        return sorted(self._scenes)

    def new_scene(self) -> int:
        sid = self._next_scene
        self._next_scene += 1
        self._scenes.setdefault(sid, [])
        return sid

    def insert(self, entry: MemoryEntry, scene_id: int, encoder: Encoder,
               image: np.ndarray | None = None) -> int:
        """Embed and append an entry. Text-only entries use the text embedding;
        with an image present the record embedding is the normalized mean of
        the text and image embeddings."""
        if encoder.dim != self.dim:
            raise ValueError(f"encoder dim {encoder.dim} != store dim {self.dim}")
        vec = encoder.encode_text(entry.text()).astype(np.float64)
        img_feat = None
        if image is not None:
            img_feat = encoder.encode_image(image)
            vec = vec + img_feat.astype(np.float64)
        idx = self.insert_record(entry, scene_id, _unit(vec))
        if image is not None:
            self._images[idx] = np.asarray(image)
            self._obs_features[idx] = img_feat
        return idx

    def insert_record(self, payload: MemoryEntry, scene_id: int,
                      embedding: np.ndarray) -> int:
        """Low-level append with a precomputed unit embedding."""
        emb = np.asarray(embedding, dtype=np.float32).reshape(-1)
        if emb.shape[0] != self.dim:
            raise ValueError(f"embedding dim {emb.shape[0]} != store dim {self.dim}")
        norm = float(np.linalg.norm(emb))
        if abs(norm - 1.0) > 1e-4:
            raise ValueError(f"embedding must be unit-norm, got |f| = {norm:.6f}")
        idx = self._next_index
        self._next_index += 1
        rec = VectorRecord(index=idx, payload=payload, embedding=emb,
                           scene_id=scene_id, superseded=False)
        self._records[idx] = rec
        self._scenes.setdefault(scene_id, []).append(idx)
        self._next_scene = max(self._next_scene, scene_id + 1)
        return idx

    def get(self, index: int) -> VectorRecord:
        try:
            return self._records[index]
        except KeyError:
            raise KeyError(f"no record with index {index}") from None

    def supersede(self, index: int) -> None:
        """Mark a record stale; idempotent. Replacements are inserted separately."""
        self.get(index).superseded = True

    def observation_image(self, index: int) -> np.ndarray | None:
        return self._images.get(index)

    def observation_feature(self, index: int) -> np.ndarray | None:
        """Image-only embedding of the record's observation, when cached."""
        return self._obs_features.get(index)

    def scene_records(self, scene_id: int) -> list[VectorRecord]:
        """Non-superseded records of one scene, in index order."""
        return [self._records[i] for i in self._scenes.get(scene_id, [])
                if not self._records[i].superseded]

    def active_records(self) -> list[VectorRecord]:
        return [r for _, r in sorted(self._records.items()) if not r.superseded]

    def iter_all(self) -> Iterable[VectorRecord]:
        return (self._records[i] for i in sorted(self._records))

    # -- persistence ------------------------------------------------------
    # Layout: <dir>/manifest.txt, one record per line
    #   index\tscene_id\tkind\tsuperseded\t<payload json>
    # plus <dir>/vectors.f32: little-endian float32, row-major, dim floats
    # per record, same order as the manifest.

    def persist(self, path: str | Path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        lines = [f"{_MAGIC} dim={self.dim} count={len(self._records)} "
                 f"next_index={self._next_index} next_scene={self._next_scene}"]
        chunks = []
        for idx in sorted(self._records):
            rec = self._records[idx]
            kind, payload = _payload_to_json(rec.payload)
            lines.append(f"{rec.index}\t{rec.scene_id}\t{kind}\t"
                         f"{int(rec.superseded)}\t{payload}")
            chunks.append(rec.embedding.astype("<f4").tobytes())
        (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
        (root / VECTORS_NAME).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path: str | Path) -> "MemoryStore":
        root = Path(path)
        manifest = root / MANIFEST_NAME
        if not manifest.exists():
            raise StoreFormatError(f"missing manifest {manifest}")
        lines = manifest.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(_MAGIC):
            raise StoreFormatError(f"bad manifest header in {manifest}")
        header = dict(kv.split("=") for kv in lines[0][len(_MAGIC):].split())
        dim = int(header["dim"])
        count = int(header["count"])
        store = cls(dim=dim)
        raw = (root / VECTORS_NAME).read_bytes()
        expected = count * dim * 4
        if len(raw) != expected:
            bad = len(raw) // (dim * 4)
            raise StoreFormatError(
                f"vector file length mismatch: {len(raw)} bytes for {count} records "
                f"of dim {dim}; data ends inside record #{bad}"
            )
        vecs = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
        body = lines[1:]
        if len(body) != count:
            raise StoreFormatError(
                f"manifest promises {count} records but has {len(body)} lines")
        for row, line in enumerate(body):
            parts = line.split("\t", 4)
            if len(parts) != 5:
                raise StoreFormatError(f"malformed manifest record #{row}: {line!r}")
            try:
                idx, scene_id, kind, superseded = (
                    int(parts[0]), int(parts[1]), parts[2], bool(int(parts[3])))
                payload = _payload_from_json(kind, parts[4])
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                raise StoreFormatError(
                    f"cannot decode manifest record #{row} (index {parts[0]}): {exc}"
                ) from exc
            if idx in store._records:
                raise StoreFormatError(f"duplicate index {idx} at manifest record #{row}")
            rec = VectorRecord(index=idx, payload=payload,
                               embedding=vecs[row].copy(), scene_id=scene_id,
                               superseded=superseded)
            store._records[idx] = rec
            store._scenes.setdefault(scene_id, []).append(idx)
        store._next_index = int(header["next_index"])
        store._next_scene = int(header["next_scene"])
        return store


def _payload_to_json(payload: MemoryEntry) -> tuple[str, str]:
    if isinstance(payload, LocalMemoryEntry):
        x, y, z, yaw = payload.state.as_tuple()
        obj = {
            "step": payload.step,
            "observation_ref": payload.observation_ref,
            "detections": [
                {"object_id": d.object_id, "category": d.category,
                 "attribute": d.attribute, "description": d.description,
                 "bbox": list(d.bbox), "position": list(map(float, d.position)),
                 "room": d.room}
                for d in payload.detections
            ],
            "scene_caption": {"room": payload.scene_caption.room,
                              "objects": list(payload.scene_caption.objects),
                              "description": payload.scene_caption.description},
            "decision": payload.decision,
            "state": [x, y, z, yaw],
            "space_description": payload.space_description,
        }
        return "local", json.dumps(obj, sort_keys=True)
    obs = payload.observer
    obj = {
        "kind": payload.kind,
        "category": payload.category,
        "position": list(map(float, payload.position)),
        "description": payload.description,
        "observer": list(obs.as_tuple()) if obs is not None else None,
    }
    return payload.kind, json.dumps(obj, sort_keys=True)


def _payload_from_json(kind: str, blob: str) -> MemoryEntry:
    obj = json.loads(blob)
    if kind == "local":
        x, y, z, yaw = obj["state"]
        return LocalMemoryEntry(
            step=obj["step"],
            observation_ref=obj["observation_ref"],
            detections=[
                Detection(object_id=d["object_id"], category=d["category"],
                          attribute=d["attribute"], description=d["description"],
                          bbox=tuple(d["bbox"]), position=np.array(d["position"]),
                          room=d["room"])
                for d in obj["detections"]
            ],
            scene_caption=SceneCaption(room=obj["scene_caption"]["room"],
                                       objects=tuple(obj["scene_caption"]["objects"]),
                                       description=obj["scene_caption"]["description"]),
            decision=obj["decision"],
            state=Pose(np.array([x, y, z]), yaw),
            space_description=obj["space_description"],
        )
    if kind in ("room", "target"):
        obs = obj["observer"]
        return GlobalMemoryEntry(
            kind=obj["kind"],
            category=obj["category"],
            position=np.array(obj["position"]),
            description=obj["description"],
            observer=Pose(np.array(obs[:3]), obs[3]) if obs is not None else None,
        )
    raise KeyError(f"unknown payload kind {kind!r}")
