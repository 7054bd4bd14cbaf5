"""Dataset and image-file I/O: IDX, PGM (P5), PNG (8-bit), synthetic shapes.

Pixel bytes p in {0..255} map to p / 127.5 - 1, so 0 -> -1 and 255 -> +1.
"""

from __future__ import annotations

import gzip
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterError, RngStream

IDX_UBYTE_3D = 0x00000803
IDX_UBYTE_1D = 0x00000801


class FormatError(ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def bytes_to_unit(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def unit_to_bytes(img) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.rint((img + 1.0) * 127.5).astype(np.uint8)


@dataclass
class DatasetHandle:
    images: np.ndarray  # (N, H, W, C) in [-1, 1]
    source: str
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, idx):
        return self.images[idx]

    @property
    def geometry(self):
        return self.images.shape[1:]

    def subset(self, start, stop=None) -> "DatasetHandle":
        sl = slice(start, stop)
        labels = None if self.labels is None else self.labels[sl]
        return DatasetHandle(self.images[sl], self.source, labels, dict(self.meta))

    def shuffled(self, seed: int) -> "DatasetHandle":
        order = RngStream(seed).permutation(len(self))
        labels = None if self.labels is None else self.labels[order]
        return DatasetHandle(self.images[order], self.source, labels, dict(self.meta))


def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an unsigned-byte IDX tensor (magic 0x0000080N, big-endian dims)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError("file too short for an IDX header", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise FormatError(f"bad IDX magic 0x{raw[:4].hex()}", 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"truncated IDX payload: expected {count} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def load_idx(images_path, labels_path=None) -> DatasetHandle:
    raw = read_idx(images_path)
    if raw.ndim != 3:
        raise FormatError(f"expected a 3-D image tensor, got {raw.ndim}-D", 3)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.shape != (raw.shape[0],):
            raise FormatError(f"{labels.shape[0]} labels for {raw.shape[0]} images", 4)
    images = bytes_to_unit(raw)[..., None]
    return DatasetHandle(images, "idx", labels, {"path": str(images_path)})


# ------------------------------------------------------------------ PGM / PNG

def _pgm_tokens(raw, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def decode_pgm(raw: bytes) -> np.ndarray:
    (magic, w, h, maxval), pos = _pgm_tokens(raw, 4)
    if magic != b"P5":
        raise FormatError(f"unsupported PGM magic {magic!r}", 0)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM supported (maxval {maxval})", pos)
    if len(raw) < pos + w * h:
        raise FormatError("truncated PGM payload", len(raw))
    return np.frombuffer(raw, np.uint8, w * h, pos).reshape(h, w, 1)


def encode_pgm(pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels[..., 0]).tobytes()


PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _png_chunks(raw):
    pos = len(PNG_SIGNATURE)
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise FormatError("truncated PNG chunk header", pos)
        length, ctype = struct.unpack(">I4s", raw[pos:pos + 8])
        data = raw[pos + 8:pos + 8 + length]
        if len(data) != length:
            raise FormatError("truncated PNG chunk", pos)
        yield ctype, data, pos
        pos += 12 + length


def _unfilter(data, h, stride, bpp):
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for row in range(h):
        ftype = data[pos]
        line = np.frombuffer(data, np.uint8, stride, pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 1:
            cur = line.copy()
            for i in range(bpp, stride):
                cur[i] = (cur[i] + cur[i - bpp]) & 0xFF
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype == 3:
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                cur[i] = (cur[i] + ((left + prev[i]) >> 1)) & 0xFF
        elif ftype == 4:
            cur = line.copy()
            for i in range(stride):
                a = cur[i - bpp] if i >= bpp else 0
                b = prev[i]
                c = prev[i - bpp] if i >= bpp else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise FormatError(f"unknown PNG filter type {ftype} in row {row}")
        out[row] = cur
        prev = cur
    return out


def decode_png(raw: bytes) -> np.ndarray:
    if raw[:8] != PNG_SIGNATURE:
        raise FormatError("bad PNG signature", 0)
    header, idat = None, []
    for ctype, data, pos in _png_chunks(raw):
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif ctype == b"IDAT":
            idat.append(data)
        elif ctype == b"IEND":
            break
    if header is None:
        raise FormatError("missing IHDR chunk", 8)
    w, h, depth, ctype, _, _, interlace = header
    if depth != 8 or ctype not in (0, 2) or interlace:
        raise FormatError(f"unsupported PNG (depth {depth}, color type {ctype}, interlace {interlace})", 16)
    channels = 1 if ctype == 0 else 3
    data = zlib.decompress(b"".join(idat))
    if len(data) != h * (w * channels + 1):
        raise FormatError("PNG image data has the wrong size")
    return _unfilter(data, h, w * channels, channels).reshape(h, w, channels)


def _chunk(ctype, data):
    body = ctype + data
    return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)


def encode_png(pixels: np.ndarray) -> bytes:
    h, w, c = pixels.shape
    if c not in (1, 3):
        raise FormatError(f"cannot write {c}-channel PNG")
    rows = np.ascontiguousarray(pixels, dtype=np.uint8).reshape(h, w * c)
    payload = b"".join(b"\x00" + row.tobytes() for row in rows)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 0 if c == 1 else 2, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(payload, 9))
            + _chunk(b"IEND", b""))


def load_image_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] == PNG_SIGNATURE:
        return bytes_to_unit(decode_png(raw))
    if raw[:2] == b"P5":
        return bytes_to_unit(decode_pgm(raw))
    raise FormatError(f"unsupported image format in {path}", 0)


def save_image_file(img, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    pixels = unit_to_bytes(img)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        data = encode_png(pixels)
    elif ext in (".pgm", ".pnm"):
        if pixels.shape[2] != 1:
            raise FormatError("PGM output requires a single channel")
        data = encode_pgm(pixels)
    else:
        raise FormatError(f"unsupported output extension {ext!r}")
    with open(path, "wb") as fh:
        fh.write(data)


def load_image_dir(path) -> DatasetHandle:
    names = sorted(n for n in os.listdir(path) if n.lower().endswith((".png", ".pgm")))
    if not names:
        raise FormatError(f"no PNG/PGM images in {path}")
    images = np.stack([load_image_file(os.path.join(path, n)) for n in names])
    return DatasetHandle(images, "image_dir", None, {"path": str(path), "files": names})


# ------------------------------------------------------------------ synthetic

def _shape_image(rng: RngStream, size: int, kind: str) -> np.ndarray:
    img = np.full((size, size), -1.0)
    rr, cc = np.mgrid[0:size, 0:size]
    if kind == "rect":
        for _ in range(int(rng.integers(1, 4))):
            r0, c0 = (int(v) for v in rng.integers(0, size - 2, 2))
            r1 = r0 + int(rng.integers(2, size - r0 + 1))
            c1 = c0 + int(rng.integers(2, size - c0 + 1))
            img[r0:r1, c0:c1] = rng.uniform(-1.0, 1.0, 1)[0]
    elif kind == "disc":
        for _ in range(int(rng.integers(1, 3))):
            cr, cc0 = rng.uniform(0, size, 2)
            rad = rng.uniform(size / 8, size / 3, 1)[0]
            img[(rr - cr) ** 2 + (cc - cc0) ** 2 <= rad ** 2] = rng.uniform(-1.0, 1.0, 1)[0]
    else:
        angle = rng.uniform(0, 2 * np.pi, 1)[0]
        ramp = np.cos(angle) * rr + np.sin(angle) * cc
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
        lo, hi = np.sort(rng.uniform(-1.0, 1.0, 2))
        img = lo + (hi - lo) * ramp
    return np.clip(img, -1.0, 1.0)


SHAPE_KINDS = ("rect", "disc", "gradient")


def synthetic_shapes(count: int, size: int, seed: int, kinds=SHAPE_KINDS) -> DatasetHandle:
    """Piecewise-smooth test images: random rectangles, discs or linear ramps."""
    if size < 8:
        raise ParameterError(f"synthetic images need size >= 8, got {size}")
    rng = RngStream(seed)
    picks = rng.integers(0, len(kinds), count)
    images = np.stack([_shape_image(rng, size, kinds[int(k)]) for k in picks])[..., None]
    labels = np.asarray(picks, dtype=np.int64)
    return DatasetHandle(images, "synthetic", labels, {"kinds": tuple(kinds), "seed": seed})


# ------------------------------------------------------------------ MNIST

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def export_bundled_mnist(dest, n_test: int = 1000, seed: int = 0) -> dict:
    """Write IDX files from the 5000 MNIST digits shipped with mlxtend.

    The digits are shuffled with `seed` and split into train/test; returns
    the paths keyed like :data:`MNIST_FILES`.
    """
    from mlxtend.data import mnist_data  # optional dependency

    x, y = mnist_data()
    order = RngStream(seed).permutation(len(x))
    x = np.asarray(x, dtype=np.uint8)[order].reshape(-1, 28, 28)
    y = np.asarray(y, dtype=np.uint8)[order]
    os.makedirs(dest, exist_ok=True)
    parts = {"train": slice(n_test, None), "test": slice(0, n_test)}
    out = {}
    for split, (img_name, lbl_name) in MNIST_FILES.items():
        img_path = os.path.join(dest, img_name)
        lbl_path = os.path.join(dest, lbl_name)
        write_idx(img_path, x[parts[split]])
        write_idx(lbl_path, y[parts[split]])
        out[split] = (img_path, lbl_path)
    return out


def load_mnist(root, split: str = "train") -> DatasetHandle:
    img_name, lbl_name = MNIST_FILES[split]
    lbl_path = os.path.join(root, lbl_name)
    return load_idx(os.path.join(root, img_name), lbl_path if os.path.exists(lbl_path) else None)
