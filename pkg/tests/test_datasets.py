import io
import os
import struct

import numpy as np
import pytest
from PIL import Image

from onenet.datasets import (FormatError, bytes_to_unit, decode_pgm, decode_png, encode_pgm,
                             encode_png, load_idx, load_image_dir, load_image_file, load_mnist,
                             read_idx, save_image_file, synthetic_shapes, unit_to_bytes,
                             write_idx)
from onenet.tensor import ParameterError, RngStream
from onenet.wavelets import haar_forward

MNIST = os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist")


def test_normalization_endpoints():
    assert bytes_to_unit(np.array([0], np.uint8))[0] == -1.0
    assert bytes_to_unit(np.array([255], np.uint8))[0] == 1.0
    assert bytes_to_unit(np.array([128], np.uint8))[0] == pytest.approx(0.00392, abs=1e-5)
    all_bytes = np.arange(256, dtype=np.uint8)
    assert np.array_equal(unit_to_bytes(bytes_to_unit(all_bytes)), all_bytes)


def test_idx_roundtrip(tmp_path):
    arr = RngStream(0).integers(0, 256, (5, 4, 3)).astype(np.uint8)
    for name in ("x.idx", "x.idx.gz"):
        write_idx(tmp_path / name, arr)
        assert np.array_equal(read_idx(tmp_path / name), arr)
    raw = (tmp_path / "x.idx").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">3I", raw[4:16]) == (5, 4, 3)


def test_idx_handle_and_labels(tmp_path):
    imgs = np.zeros((3, 28, 28), np.uint8)
    imgs[1] = 255
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", np.array([4, 1, 9], np.uint8))
    h = load_idx(tmp_path / "i", tmp_path / "l")
    assert len(h) == 3 and h.geometry == (28, 28, 1)
    assert h[1].min() == 1.0 and h[0].max() == -1.0
    assert h.labels.tolist() == [4, 1, 9]


def test_idx_errors(tmp_path):
    write_idx(tmp_path / "ok", np.zeros((2, 3, 3), np.uint8))
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "magic").write_bytes(b"\x00\x00\x0d\x03" + raw[4:])
    with pytest.raises(FormatError) as err:
        read_idx(tmp_path / "magic")
    assert err.value.offset == 0
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_idx(tmp_path / "short")
    (tmp_path / "hdr").write_bytes(raw[:7])
    with pytest.raises(FormatError):
        read_idx(tmp_path / "hdr")
    write_idx(tmp_path / "lbl", np.zeros(3, np.uint8))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "ok", tmp_path / "lbl")


def test_mnist_export_counts():
    tr, te = load_mnist(MNIST, "train"), load_mnist(MNIST, "test")
    assert len(tr) == 4000 and len(te) == 1000
    assert tr.geometry == (28, 28, 1)
    assert tr.images.min() == -1.0 and tr.images.max() == 1.0
    assert set(te.labels.tolist()) == set(range(10))


def test_pgm_all_white():
    raw = b"P5\n# comment\n2 2\n255\n" + b"\xff" * 4
    img = bytes_to_unit(decode_pgm(raw))
    assert np.all(img == 1.0)


def test_pgm_errors():
    with pytest.raises(FormatError):
        decode_pgm(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(FormatError):
        decode_pgm(b"P5\n2 2\n255\n\x00")


def random_image(shape, seed=0):
    return RngStream(seed).uniform(-1, 1, shape)


@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_save_load_roundtrip(tmp_path, ext):
    img = random_image((9, 13, 1))
    path = tmp_path / f"a.{ext}"
    save_image_file(img, path)
    back = load_image_file(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 2 / 255
    # independent decoder
    ref = np.asarray(Image.open(path), dtype=np.uint8)
    assert np.array_equal(unit_to_bytes(img)[..., 0], ref)


@pytest.mark.parametrize("mode", ["L", "RGB"])
def test_decode_pillow_png(mode):
    rng = RngStream(1)
    shape = (17, 11) if mode == "L" else (17, 11, 3)
    pixels = rng.integers(0, 256, shape).astype(np.uint8)
    # smooth rows so Pillow picks a mix of filter types
    pixels[5:] = np.sort(pixels[5:], axis=1)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode).save(buf, format="PNG", optimize=True)
    out = decode_png(buf.getvalue())
    assert np.array_equal(out.reshape(pixels.shape), pixels)


def test_encode_png_readable_by_pillow():
    pixels = RngStream(2).integers(0, 256, (6, 5, 3)).astype(np.uint8)
    ref = np.asarray(Image.open(io.BytesIO(encode_png(pixels))))
    assert np.array_equal(ref, pixels)
    pgm = np.asarray(Image.open(io.BytesIO(encode_pgm(pixels[..., :1]))))
    assert np.array_equal(pgm, pixels[..., 0])


def test_unsupported_format(tmp_path):
    (tmp_path / "x.png").write_bytes(b"GIF89a....")
    with pytest.raises(FormatError):
        load_image_file(tmp_path / "x.png")
    with pytest.raises(FormatError):
        save_image_file(np.zeros((2, 2)), tmp_path / "x.jpg")


def test_image_dir(tmp_path):
    for i in range(3):
        save_image_file(random_image((8, 8, 1), i), tmp_path / f"{i}.png")
    h = load_image_dir(tmp_path)
    assert len(h) == 3 and h.meta["files"] == ["0.png", "1.png", "2.png"]


def test_synthetic_shapes():
    a = synthetic_shapes(20, 16, seed=3)
    b = synthetic_shapes(20, 16, seed=3)
    assert np.array_equal(a.images, b.images)
    assert a.images.min() >= -1 and a.images.max() <= 1
    assert a.geometry == (16, 16, 1)
    with pytest.raises(ParameterError):
        synthetic_shapes(1, 4, 0)


def test_synthetic_rectangles_have_sparse_wavelet_detail():
    rects = synthetic_shapes(30, 32, seed=4, kinds=("rect",))
    for img in rects:
        c = haar_forward(img, 3)
        detail = np.concatenate([b.ravel() for bands in c.details for b in bands])
        assert np.mean(np.abs(detail) < 1e-6) >= 0.6


def test_dataset_shuffle_deterministic():
    h = synthetic_shapes(10, 8, seed=0)
    assert np.array_equal(h.shuffled(5).images, h.shuffled(5).images)
    assert not np.array_equal(h.shuffled(5).images, h.images)
    assert len(h.subset(2, 5)) == 3
