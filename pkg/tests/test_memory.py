import numpy as np
import pytest

from memnav.encoders import HashEncoder
from memnav.errors import StoreFormatError
from memnav.geometry import Detection, Pose
from memnav.memory import (MANIFEST_NAME, VECTORS_NAME, GlobalMemoryEntry,
                           LocalMemoryEntry, MemoryStore, SceneCaption,
                           build_local_entry)

from conftest import unit_vectors


def detection(cat="sofa", attr="white", desc="a white fabric sofa"):
    return Detection(object_id="o1", category=cat, attribute=attr,
                     description=desc, bbox=(1, 2, 3, 4),
                     position=np.array([2.0, 2.0, 0.0]), room="living room")


def local_entry(step=0, decision="start", x=1.0):
    return build_local_entry(
        observation_ref=f"step{step:03d}", detections=[detection()],
        scene_caption=SceneCaption("living room", ("sofa",), "a living room"),
        step=step, decision=decision, state=Pose.at(x, 1.0, 0.5))


def test_build_entry_without_detections():
    e = build_local_entry("step000", [], SceneCaption(), 0, "start", Pose.at(0, 0))
    assert e.detections == []


def test_entry_text_contains_detection_fields():
    e = local_entry()
    text = e.text()
    for needle in ("sofa", "white", "a white fabric sofa"):
        assert needle in text


def test_negative_step_rejected():
    with pytest.raises(ValueError):
        build_local_entry("x", [], SceneCaption(), -1, "start", Pose.at(0, 0))


def test_missing_caption_degrades_to_empty():
    e = build_local_entry("x", [], None, 0, "start", Pose.at(0, 0))
    assert e.scene_caption.room == ""


def test_empty_detection_category_rejected():
    with pytest.raises(ValueError):
        build_local_entry("x", [detection(cat="")], SceneCaption(), 0,
                          "start", Pose.at(0, 0))


def test_global_entry_validation():
    with pytest.raises(ValueError):
        GlobalMemoryEntry(kind="banana", category="x")
    with pytest.raises(ValueError):
        GlobalMemoryEntry(kind="target", category="x",
                          position=np.array([np.inf, 0, 0]))


def test_canonical_text_injective_over_corpus():
    entries = [local_entry(step=s, decision=d, x=x)
               for s in range(4) for d in ("start", "move north 1.0m")
               for x in (1.0, 2.0)]
    entries += [GlobalMemoryEntry(kind="room", category=r,
                                  position=np.array([i, 0.0, 0.0]))
                for i, r in enumerate(("kitchen", "study"))]
    texts = [e.text() for e in entries]
    assert len(set(texts)) == len(texts)


# -- store semantics ---------------------------------------------------------

def test_insert_assigns_sequential_indices():
    store = MemoryStore(dim=32)
    enc = HashEncoder(dim=32)
    i0 = store.insert(local_entry(0), 0, enc)
    i1 = store.insert(local_entry(1), 0, enc)
    assert (i0, i1) == (0, 1)
    assert {r.index for r in store.scene_records(0)} == {0, 1}


def test_insert_dimension_mismatch():
    store = MemoryStore(dim=16)
    with pytest.raises(ValueError):
        store.insert(local_entry(), 0, HashEncoder(dim=32))


def test_embeddings_unit_norm():
    store = MemoryStore(dim=64)
    enc = HashEncoder(dim=64)
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    img[:, :4] = 200
    store.insert(local_entry(0), 0, enc)
    store.insert(local_entry(1), 0, enc, image=img)
    for rec in store.iter_all():
        assert abs(float(np.linalg.norm(rec.embedding)) - 1.0) <= 1e-6


def test_insert_record_rejects_non_unit():
    store = MemoryStore(dim=8)
    with pytest.raises(ValueError):
        store.insert_record(local_entry(), 0, np.ones(8, dtype=np.float32))


def test_supersede_hides_and_is_idempotent():
    store = MemoryStore(dim=16)
    enc = HashEncoder(dim=16)
    store.insert(local_entry(0), 0, enc)
    store.insert(local_entry(1), 0, enc)
    store.supersede(0)
    assert [r.index for r in store.scene_records(0)] == [1]
    store.supersede(0)  # second call is a no-op success
    assert store.get(0).superseded


def test_supersede_unknown_index():
    store = MemoryStore(dim=16)
    enc = HashEncoder(dim=16)
    for s in range(3):
        store.insert(local_entry(s), 0, enc)
    with pytest.raises(KeyError):
        store.supersede(999)


def test_indices_never_reused_after_supersede():
    store = MemoryStore(dim=16)
    enc = HashEncoder(dim=16)
    a = store.insert(local_entry(0), 0, enc)
    store.supersede(a)
    b = store.insert(local_entry(1), 0, enc)
    assert b == a + 1


# -- persistence -------------------------------------------------------------

def random_store(rng, n, dim=24):
    store = MemoryStore(dim=dim)
    vecs = unit_vectors(rng, n, dim)
    for i in range(n):
        if i % 3 == 0:
            payload = local_entry(step=i, x=float(i))
        elif i % 3 == 1:
            payload = GlobalMemoryEntry(
                kind="target", category=f"cat{i}",
                position=np.array([i * 0.5, 1.0, 0.0]),
                description=f"desc {i}", observer=Pose.at(i * 0.1, 0.0, 0.3))
        else:
            payload = GlobalMemoryEntry(kind="room", category=f"room{i}",
                                        position=np.array([0.0, i * 0.2, 0.0]))
        store.insert_record(payload, int(rng.integers(0, 3)), vecs[i])
    for i in range(0, n, 7):
        store.supersede(i)
    return store


def assert_stores_equal(a, b):
    assert a.dim == b.dim and len(a) == len(b)
    assert a.scene_ids == b.scene_ids
    for ra, rb in zip(a.iter_all(), b.iter_all()):
        assert ra.index == rb.index
        assert ra.scene_id == rb.scene_id
        assert ra.superseded == rb.superseded
        assert ra.embedding.tobytes() == rb.embedding.tobytes()
        assert ra.payload.text() == rb.payload.text()


def test_roundtrip_empty_store(tmp_path):
    store = MemoryStore(dim=16)
    store.persist(tmp_path)
    assert_stores_equal(store, MemoryStore.load(tmp_path))


def test_roundtrip_random_records(tmp_path, rng):
    store = random_store(rng, 100)
    store.persist(tmp_path)
    loaded = MemoryStore.load(tmp_path)
    assert_stores_equal(store, loaded)
    # indices continue after the persisted ones
    nxt = loaded.insert(local_entry(0), 0, HashEncoder(dim=24))
    assert nxt == 100


def test_truncated_vector_file_names_record(tmp_path, rng):
    store = random_store(rng, 10)
    store.persist(tmp_path)
    blob = (tmp_path / VECTORS_NAME).read_bytes()
    (tmp_path / VECTORS_NAME).write_bytes(blob[: len(blob) - 50])
    with pytest.raises(StoreFormatError, match="record"):
        MemoryStore.load(tmp_path)


def test_corrupt_manifest_line(tmp_path, rng):
    store = random_store(rng, 5)
    store.persist(tmp_path)
    lines = (tmp_path / MANIFEST_NAME).read_text().splitlines()
    lines[3] = "not\tvalid"
    (tmp_path / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    with pytest.raises(StoreFormatError):
        MemoryStore.load(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(StoreFormatError):
        MemoryStore.load(tmp_path / "nope")
