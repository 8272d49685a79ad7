import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mssr.data import (
    DatasetManifest, ImageBuffer, ImageError, ManifestEntry, ManifestError, SeededRng, camera_from_name,
    derive_stream, fnv1a64, load_float, load_manifest, read_image, to_bytes, to_float, write_image,
)
from oracles import fnv1a64_reference

GOLDEN = Path(__file__).parent / "golden" / "rng_seed0_augment.json"


# ---------------------------------------------------------------------------
# hashing and random streams


@pytest.mark.parametrize("text, value", [("", 0xCBF29CE484222325), ("a", 0xAF63DC4C8601EC8C),
                                         ("foobar", 0x85944171F73967E8)])
def test_fnv1a64_published_vectors(text, value):
    assert fnv1a64(text) == value


@given(st.text(max_size=40))
def test_fnv1a64_matches_reference(text):
    assert fnv1a64(text) == fnv1a64_reference(text)


def test_golden_stream():
    g = json.loads(GOLDEN.read_text())
    mk = lambda: SeededRng(g["seed"], g["stream"])  # noqa: E731
    assert [str(v) for v in mk().raw(4).tolist()] == g["raw"]
    assert mk().bits(3).tolist() == g["bits"]
    assert mk().uniform(3).tolist() == g["uniform"]
    assert mk().integers(10, 5).tolist() == g["integers_10"]
    assert mk().normal((4,)).tolist() == g["normal"]
    assert mk().permutation(6).tolist() == g["permutation_6"]


def test_raw_stream_is_pcg64_keyed_by_seed_and_name():
    expected = np.random.PCG64(5 ^ fnv1a64_reference("crop")).random_raw(8)
    np.testing.assert_array_equal(SeededRng(5, "crop").raw(8), expected)


def test_uniform_from_top_53_bits():
    raw = SeededRng(1, "u").raw(16)
    want = np.array([(int(v) >> 11) / 2.0**53 for v in raw])
    np.testing.assert_array_equal(SeededRng(1, "u").uniform(16), want)


def test_same_seed_and_name_repeat():
    np.testing.assert_array_equal(derive_stream(9, "x").raw(100), derive_stream(9, "x").raw(100))


def test_different_names_differ():
    a, b = derive_stream(0, "crop").raw(1000), derive_stream(0, "augment").raw(1000)
    assert (a != b).all()


def test_derive_nests_names():
    root = SeededRng(4)
    np.testing.assert_array_equal(root.derive("a").derive("b").raw(4), SeededRng(4, "a/b").raw(4))


@settings(max_examples=30)
@given(high=st.integers(1, 1000), seed=st.integers(0, 2**32))
def test_integers_in_range(high, seed):
    v = SeededRng(seed).integers(high, 50)
    assert v.min() >= 0 and v.max() < high


@given(n=st.integers(0, 50), seed=st.integers(0, 2**32))
def test_permutation_is_a_permutation(n, seed):
    assert sorted(SeededRng(seed).permutation(n).tolist()) == list(range(n))


def test_normal_moments():
    z = SeededRng(0, "n").normal((200_000,))
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_integers_rejects_nonpositive():
    with pytest.raises(ValueError):
        SeededRng(0).integers(0)


# ---------------------------------------------------------------------------
# images


def test_quantization_of_128():
    f = to_float(np.full((1, 1, 3), 128, np.uint8))
    assert f.dtype == np.float32 and f.shape == (1, 3, 1, 1)
    assert f[0, 0, 0, 0] == pytest.approx(128 / 255)
    assert to_bytes(f)[0, 0, 0] == 128


@settings(max_examples=20)
@given(st.integers(0, 255))
def test_byte_float_byte_roundtrip(v):
    assert to_bytes(to_float(np.full((1, 1, 3), v, np.uint8)))[0, 0, 0] == v


def test_to_bytes_clips():
    assert to_bytes(np.array([-0.5, 1.5, 0.5]).reshape(1, 3, 1, 1)).ravel().tolist() == [0, 255, 128]


def test_write_read_roundtrip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (13, 17, 3), dtype=np.uint8)
    write_image(ImageBuffer(px), tmp_path / "a.png")
    back = read_image(tmp_path / "a.png")
    np.testing.assert_array_equal(back.pixels, px)
    assert (back.height, back.width) == (13, 17)


def test_black_pixel(tmp_path):
    write_image(np.zeros((1, 1, 3), np.uint8), tmp_path / "k.png")
    assert load_float(tmp_path / "k.png").tolist() == [[[[0.0]], [[0.0]], [[0.0]]]]


def test_alpha_dropped_and_gray_promoted(tmp_path):
    Image.fromarray(np.full((2, 2, 4), 200, np.uint8), "RGBA").save(tmp_path / "a.png")
    Image.fromarray(np.full((2, 2), 50, np.uint8), "L").save(tmp_path / "g.png")
    assert read_image(tmp_path / "a.png").pixels.shape == (2, 2, 3)
    assert read_image(tmp_path / "g.png").pixels.tolist() == [[[50] * 3] * 2] * 2


def test_sixteen_bit_rejected(tmp_path):
    Image.fromarray(np.full((2, 2), 40000, np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(ImageError, match="bit depth"):
        read_image(tmp_path / "d.png")


def test_corrupt_file(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(ImageError):
        read_image(tmp_path / "x.png")


def test_image_buffer_checks_layout():
    with pytest.raises(ImageError):
        ImageBuffer(np.zeros((2, 2), np.uint8))


# ---------------------------------------------------------------------------
# manifests


def _png(path):
    write_image(np.zeros((4, 4, 3), np.uint8), path)
    return path.name


def test_camera_tags():
    assert camera_from_name("cam2_06") == 2
    assert camera_from_name("cam1-10.png") == 1
    assert camera_from_name("scene3") is None


def test_manifest_parsing(tmp_path):
    a, b = _png(tmp_path / "cam2_02_lr.png"), _png(tmp_path / "hr.png")
    c = _png(tmp_path / "x_lr.png")
    (tmp_path / "m.tsv").write_text(
        "# id\tlr\thr\tcamera\tsplit\n"
        f"cam2_02\t{a}\t{b}\t-\ttrain\n"
        f"other\t{c}\t-\t1\tval\n"
        f"third\t{a}\n"
    )
    m = load_manifest(tmp_path / "m.tsv")
    assert [e.id for e in m] == ["cam2_02", "other", "third"]
    assert [e.camera_tag for e in m] == [2, 1, 2]
    assert m.entries[1].hr_path is None
    assert [e.id for e in m.select("val")] == ["other"]


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("")
    assert len(load_manifest(tmp_path / "m.tsv")) == 0


def test_missing_hr_in_eval_mode_names_entry(tmp_path):
    a = _png(tmp_path / "a.png")
    (tmp_path / "m.tsv").write_text(f"img7\t{a}\t-\n")
    with pytest.raises(ManifestError, match="img7"):
        load_manifest(tmp_path / "m.tsv", require_hr=True)


def test_missing_file_and_duplicate_id(tmp_path):
    a = _png(tmp_path / "a.png")
    (tmp_path / "m.tsv").write_text(f"one\tnope.png\n")
    with pytest.raises(ManifestError, match="one"):
        load_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text(f"one\t{a}\none\t{a}\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "m.tsv")


def test_malformed_line(tmp_path):
    (tmp_path / "m.tsv").write_text("lonely\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.tsv")


def test_manifest_write_roundtrip(tmp_path):
    a, b = _png(tmp_path / "a.png"), _png(tmp_path / "b.png")
    m = DatasetManifest([ManifestEntry("cam1_1", tmp_path / a, tmp_path / b, 1, "train"),
                         ManifestEntry("z", tmp_path / b, None, None, "")], tmp_path)
    m.write(tmp_path / "out" / "m.tsv")
    back = load_manifest(tmp_path / "out" / "m.tsv")
    assert [(e.id, e.lr_path.resolve(), e.camera_tag, e.split) for e in back] == \
        [(e.id, e.lr_path.resolve(), e.camera_tag, e.split) for e in m]
