import numpy as np
import pytest

from memnav.encoders import (COLOR_RGB, HashEncoder, SemanticEncoder,
                             tokenize)


def test_tokenize_strips_punctuation():
    assert tokenize("A white, fabric sofa!") == ["a", "white", "fabric", "sofa"]


@pytest.mark.parametrize("enc_cls", [HashEncoder, SemanticEncoder])
def test_encoders_deterministic_and_unit(enc_cls):
    a = enc_cls(dim=128, seed=3)
    b = enc_cls(dim=128, seed=3)
    for text in ("a yellow sofa", "", "step: 3"):
        va, vb = a.encode_text(text), b.encode_text(text)
        np.testing.assert_array_equal(va, vb)
        assert abs(np.linalg.norm(va) - 1.0) <= 1e-6
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    img[:, :, 0] = 200
    np.testing.assert_array_equal(a.encode_image(img), b.encode_image(img))


def test_hash_encoder_seed_changes_embedding():
    a = HashEncoder(dim=64, seed=1).encode_text("sofa")
    b = HashEncoder(dim=64, seed=2).encode_text("sofa")
    assert float(a @ b) < 0.9


def test_semantic_encoder_related_text_closer():
    enc = SemanticEncoder(dim=256, seed=0)
    sofa1 = enc.encode_text("a white sofa in the living room")
    sofa2 = enc.encode_text("the white sofa of the living room")
    table = enc.encode_text("a brown table in the kitchen")
    assert float(sofa1 @ sofa2) > float(sofa1 @ table)


def test_semantic_image_color_sensitivity():
    enc = SemanticEncoder(dim=256, seed=0)
    yellow = np.full((16, 16, 3), COLOR_RGB["yellow"], dtype=np.uint8)
    white = np.full((16, 16, 3), COLOR_RGB["white"], dtype=np.uint8)
    f_y, f_w = enc.encode_image(yellow), enc.encode_image(white)
    t_y = enc.encode_text("yellow")
    assert float(f_y @ t_y) > float(f_w @ t_y)


def test_semantic_image_shading_invariance():
    enc = SemanticEncoder(dim=256, seed=0)
    base = np.full((16, 16, 3), COLOR_RGB["blue"], dtype=np.uint8)
    shaded = (base * 0.8).astype(np.uint8)
    assert float(enc.encode_image(base) @ enc.encode_image(shaded)) > 0.99


def test_encoder_dim_too_small_for_vocab():
    with pytest.raises(ValueError):
        SemanticEncoder(dim=8)
