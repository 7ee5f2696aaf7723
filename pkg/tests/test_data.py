import time

import numpy as np
import pytest

from breps.data import (
    UserAnnotation,
    downscale_longest,
    load_annotations,
    load_corpus,
    load_instance,
    make_toy_corpus,
    read_pgm,
    write_annotations,
    write_corpus,
    write_pgm,
)
from breps.errors import AnnotationParseError, EmptyMaskError, InvalidInputError
from breps.geometry import BBox


# --- PGM --------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mask = (rng.random((7, 11)) < 0.3).astype(np.uint8) * 255
    path = tmp_path / "m.pgm"
    write_pgm(path, mask)
    back = read_pgm(path)
    np.testing.assert_array_equal(back, mask)


def test_pgm_ascii_variant(tmp_path):
    path = tmp_path / "m.pgm"
    path.write_bytes(b"P2\n# comment line\n3 2\n255\n0 255 0\n255 0 255\n")
    back = read_pgm(path)
    np.testing.assert_array_equal(back, [[0, 255, 0], [255, 0, 255]])


def test_pgm_header_comments_and_errors(tmp_path):
    good = tmp_path / "c.pgm"
    good.write_bytes(b"P5\n# width then height\n2 2\n255\n\x00\x01\x02\x03")
    assert read_pgm(good).shape == (2, 2)

    bad_magic = tmp_path / "bad.pgm"
    bad_magic.write_bytes(b"P7\n2 2\n255\n\x00\x01\x02\x03")
    with pytest.raises(InvalidInputError):
        read_pgm(bad_magic)

    truncated = tmp_path / "short.pgm"
    truncated.write_bytes(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(InvalidInputError):
        read_pgm(truncated)


# --- load_instance -------------------------------------------------------------


def test_load_instance_single_pixel_convention(tmp_path):
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[2, 1] = 255  # (col, row) = (1, 2)
    path = tmp_path / "one.pgm"
    write_pgm(path, mask)
    inst = load_instance(path)
    assert inst.tight == BBox(1, 2, 2, 3)
    assert inst.image_id == "one"


def test_load_instance_empty_mask(tmp_path):
    path = tmp_path / "empty.pgm"
    write_pgm(path, np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(EmptyMaskError):
        load_instance(path)


def test_reload_yields_bit_identical_instance(tmp_path):
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[4:11, 5:13] = 255
    path = tmp_path / "stable.pgm"
    write_pgm(path, mask)
    a = load_instance(path)
    b = load_instance(path)
    assert a.image_id == b.image_id
    assert a.tight == b.tight
    np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
    assert a.objectness.tobytes() == b.objectness.tobytes()
    assert a.gate_weight.tobytes() == b.gate_weight.tobytes()


def test_load_png_mask(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    mask = np.zeros((6, 8), dtype=np.uint8)
    mask[2:4, 3:6] = 255
    path = tmp_path / "m.png"
    pil.fromarray(mask).save(path)
    inst = load_instance(path)
    assert inst.tight == BBox(3, 2, 6, 4)


def test_missing_file():
    with pytest.raises(InvalidInputError):
        load_instance("/nonexistent/path.pgm")


# --- downscale_longest ------------------------------------------------------------


def make_mask_instance(w, h, box, ident="scale"):
    mask = np.zeros((h, w), dtype=np.uint8)
    x1, y1, x2, y2 = box
    mask[y1:y2, x1:x2] = 1
    from breps.segmodel import make_instance

    return make_instance(ident, mask)


def test_downscale_within_limit_is_identity():
    inst = make_mask_instance(800, 600, (100, 100, 400, 400))
    assert downscale_longest(inst, limit=1024) is inst


def test_downscale_aspect_arithmetic():
    inst = make_mask_instance(2048, 1024, (200, 200, 1200, 800))
    out = downscale_longest(inst, limit=1024)
    assert (out.width, out.height) == (1024, 512)
    assert out.gt_mask.any()


def test_downscale_idempotent_at_limit():
    inst = make_mask_instance(200, 100, (20, 20, 120, 80))
    once = downscale_longest(inst, limit=64)
    twice = downscale_longest(once, limit=64)
    assert once is twice
    assert max(once.width, once.height) == 64


def test_downscale_preserves_object_above_two_px():
    inst = make_mask_instance(256, 256, (100, 100, 140, 140))
    out = downscale_longest(inst, limit=32)  # object becomes ~5x5
    assert out.gt_mask.any()
    assert out.tight.width >= 2


# --- annotations -----------------------------------------------------------------


def test_annotations_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    anns = [
        UserAnnotation(
            f"img-{i % 3}",
            f"user-{i}",
            "desktop" if i % 2 == 0 else "mobile",
            BBox(*rng.uniform(-10, 110, size=4)),
        )
        for i in range(20)
    ]
    path = tmp_path / "a.csv"
    write_annotations(path, anns)
    back = load_annotations(path)
    assert back == anns  # exact float round trip via repr


def test_annotations_three_rows(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text(
        "image_id,user_id,device,x1,y1,x2,y2\n"
        "img,a,desktop,1,2,3,4\n"
        "img,b,mobile,0.5,0.25,10.125,20.0625\n"
        "img,c,desktop,9,9,1,1\n"
    )
    anns = load_annotations(path)
    assert len(anns) == 3
    assert anns[2].bbox == BBox(9, 9, 1, 1)  # raw unordered accepted


def test_annotations_bad_device_names_enum_and_line(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text(
        "image_id,user_id,device,x1,y1,x2,y2\n"
        "img,a,desktop,1,2,3,4\n"
        "img,b,tablet,1,2,3,4\n"
    )
    with pytest.raises(AnnotationParseError) as err:
        load_annotations(path)
    assert err.value.line_number == 3
    assert "desktop" in str(err.value) and "mobile" in str(err.value)


def test_annotations_bad_coordinate(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("image_id,user_id,device,x1,y1,x2,y2\nimg,a,desktop,1,2,three,4\n")
    with pytest.raises(AnnotationParseError) as err:
        load_annotations(path)
    assert err.value.line_number == 2


def test_annotations_header_mismatch(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("id,user,device,x1,y1,x2,y2\n")
    with pytest.raises(AnnotationParseError):
        load_annotations(path)


# --- toy corpus -----------------------------------------------------------------


def test_corpus_deterministic_per_seed():
    a = make_toy_corpus(10, 32, seed=11)
    b = make_toy_corpus(10, 32, seed=11)
    c = make_toy_corpus(10, 32, seed=12)
    assert [i.image_id for i in a] == [i.image_id for i in b]
    for ia, ib in zip(a, b):
        np.testing.assert_array_equal(ia.gt_mask, ib.gt_mask)
        assert ia.objectness.tobytes() == ib.objectness.tobytes()
    assert any(
        not np.array_equal(ia.gt_mask, ic.gt_mask) for ia, ic in zip(a, c)
    )


def test_corpus_instances_are_valid():
    for inst in make_toy_corpus(25, 48, seed=13):
        assert inst.gt_mask.any()
        assert inst.tight.is_ordered()
        assert 0 <= inst.tight.x1 and inst.tight.x2 <= inst.width
        assert inst.objectness.min() > 0.0
        assert inst.objectness.max() <= 1.0


def test_corpus_generation_speed():
    start = time.perf_counter()
    make_toy_corpus(50, 64, seed=14)
    assert time.perf_counter() - start < 1.0


def test_corpus_validation():
    with pytest.raises(InvalidInputError):
        make_toy_corpus(0, 32, seed=0)
    with pytest.raises(InvalidInputError):
        make_toy_corpus(5, 8, seed=0)


# --- corpus persistence -----------------------------------------------------------


def test_corpus_round_trip(tmp_path):
    corpus = make_toy_corpus(6, 32, seed=15)
    write_corpus(tmp_path / "corpus", corpus, meta={"seed": 15})
    back = load_corpus(tmp_path / "corpus")
    assert [i.image_id for i in back] == [i.image_id for i in corpus]
    for ia, ib in zip(corpus, back):
        np.testing.assert_array_equal(ia.gt_mask, ib.gt_mask)
        assert ia.tight == ib.tight
        assert ia.objectness.tobytes() == ib.objectness.tobytes()


def test_load_corpus_requires_manifest(tmp_path):
    with pytest.raises(InvalidInputError):
        load_corpus(tmp_path)
