import struct

import numpy as np
import pytest
from PIL import Image

from semstyle.errors import InvalidInputError
from semstyle.evalkit import gen_scene
from semstyle.fileio import (
    ImageIOError,
    decode_tensor,
    encode_tensor,
    load_image,
    load_mask,
    read_tensor,
    save_image,
    save_mask,
    write_tensor,
)
from semstyle.tensor_core import SegmentationMask


def test_tensor_round_trip_bit_exact(tmp_path):
    x = np.random.default_rng(0).normal(size=(2, 3, 5)).astype(np.float32)
    x[0, 0, 0] = -0.0
    write_tensor(tmp_path / "x.fmap", x)
    y = read_tensor(tmp_path / "x.fmap")
    assert y.tobytes() == x.tobytes() and y.shape == x.shape


def test_tensor_header_layout():
    data = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert data[:4] == b"FMAP"
    assert struct.unpack_from("<IIII", data, 4) == (1, 2, 2, 3)
    assert data[20] == 0
    assert len(data) == 21 + 6 * 4


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: b"XMAP" + d[4:],
        lambda d: d[:-4],
        lambda d: d[:20] + b"\x01" + d[21:],
        lambda d: d[:4] + struct.pack("<I", 9) + d[8:],
    ],
)
def test_tensor_rejects_corruption(mutate):
    data = encode_tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ImageIOError):
        decode_tensor(mutate(data))


def test_image_round_trip_8bit(tmp_path):
    rng = np.random.default_rng(1)
    q = rng.integers(0, 256, size=(3, 5, 7)).astype(np.float32) / 255
    save_image(tmp_path / "a.png", q)
    back = load_image(tmp_path / "a.png")
    assert back.shape == (3, 5, 7)
    np.testing.assert_array_equal(np.round(back * 255), np.round(q * 255))


def test_grayscale_png_values(tmp_path):
    pixels = np.array([[0, 17, 255], [128, 64, 3]], dtype=np.uint8)
    Image.fromarray(pixels, "L").save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png")
    assert img.shape == (1, 2, 3)
    np.testing.assert_allclose(img[0], pixels / 255.0, atol=1e-7)


def test_16bit_png(tmp_path):
    pixels = np.array([[0, 1000], [65535, 30000]], dtype=np.uint16)
    Image.fromarray(pixels).save(tmp_path / "g16.png")
    img = load_image(tmp_path / "g16.png")
    np.testing.assert_allclose(img[0], pixels / 65535.0, atol=1e-7)


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(ImageIOError, match="bad.png"):
        load_image(tmp_path / "bad.png")
    with pytest.raises(ImageIOError, match="missing.png"):
        load_image(tmp_path / "missing.png")
    Image.new("RGBA", (2, 2)).save(tmp_path / "rgba.png")
    with pytest.raises(ImageIOError, match="mode"):
        load_image(tmp_path / "rgba.png")


def test_mask_round_trip_and_ignore(tmp_path):
    _, m = gen_scene(4, "day", 16, 32, 3)
    labels = m.labels.copy()
    labels[0, :4] = 255
    save_mask(tmp_path / "m.png", SegmentationMask(labels))
    back = load_mask(tmp_path / "m.png")
    np.testing.assert_array_equal(back.labels, labels)
    assert back.ignore_id == 255 and 255 not in back.classes()


def test_mask_histogram_matches_bytes(tmp_path):
    pixels = np.random.default_rng(2).integers(0, 6, size=(9, 11)).astype(np.uint8)
    Image.fromarray(pixels, "L").save(tmp_path / "m.png")
    m = load_mask(tmp_path / "m.png")
    raw = np.asarray(Image.open(tmp_path / "m.png"))
    assert np.bincount(m.labels.ravel()).tolist() == np.bincount(raw.ravel()).tolist()


def test_multichannel_mask_rejected(tmp_path):
    Image.new("RGB", (3, 3)).save(tmp_path / "m.png")
    with pytest.raises(InvalidInputError):
        load_mask(tmp_path / "m.png")


def test_atomic_write_leaves_no_temp_on_error(tmp_path):
    with pytest.raises(InvalidInputError):
        save_image(tmp_path / "x.png", np.zeros((2, 4, 4)))
    assert list(tmp_path.iterdir()) == []
