"""Dataset ingestion (IDX, PGM), synthetic stand-ins, and image dumps."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SYNTH_KINDS = ("uniform_noise", "gaussian_blobs", "binary_strokes")


@dataclass(frozen=True)
class Dataset:
    name: str
    images: tuple[np.ndarray, ...]
    labels: tuple[int, ...]
    classes: int

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.images:
            shape = self.images[0].shape
            for im in self.images:
                if im.shape != shape:
                    raise ValueError(f"mixed image shapes {shape} and {im.shape}")
                if im.size and (im.min() < 0.0 or im.max() > 1.0):
                    raise ValueError("pixel values must lie in [0, 1]")
        for lab in self.labels:
            if not 0 <= lab < self.classes:
                raise ValueError(f"label {lab} outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.images[0].shape if self.images else ()

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(self.name, tuple(self.images[i] for i in indices),
                       tuple(self.labels[i] for i in indices), self.classes)


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# IDX (MNIST layout)


def parse_idx(image_bytes: bytes, label_bytes: bytes, limit: int | None = None,
              name: str = "idx", classes: int = 10) -> Dataset:
    if len(image_bytes) < 16:
        raise FormatError("idx", "image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError("idx", f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    if len(label_bytes) < 8:
        raise FormatError("idx", "label header truncated")
    lmagic, ln = struct.unpack(">II", label_bytes[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError("idx", f"label magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if ln != n:
        raise FormatError("idx", f"count mismatch: {n} images vs {ln} labels")
    if len(image_bytes) - 16 < n * rows * cols:
        raise FormatError("idx", f"image payload truncated: need {n * rows * cols} bytes")
    if len(label_bytes) - 8 < n:
        raise FormatError("idx", f"label payload truncated: need {n} bytes")
    count = n if limit is None else max(0, min(int(limit), n))
    pix = np.frombuffer(image_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    pix = pix.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=count, offset=8)
    if count and int(labels.max()) >= classes:
        classes = int(labels.max()) + 1
    return Dataset(name, tuple(_ro(p) for p in pix), tuple(int(v) for v in labels), classes)


def load_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    return parse_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes(), limit,
                     name=Path(images_path).stem)


def encode_idx(images: Sequence[np.ndarray], labels: Sequence[int]) -> tuple[bytes, bytes]:
    """Inverse of :func:`parse_idx` for uint8 pixel arrays of shape (H, W)."""
    arr = np.asarray(images, dtype=np.uint8)
    n, rows, cols = arr.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + arr.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, n) + np.asarray(labels, dtype=np.uint8).tobytes()
    return img, lab


# ---------------------------------------------------------------------------
# PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("pgm", "malformed header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def parse_pgm(data: bytes) -> np.ndarray:
    """Decode P2/P5 bytes to an (H, W) array scaled into [0, 1]."""
    if len(data) < 2 or data[:2] not in (b"P2", b"P5"):
        raise FormatError("pgm", "missing P2/P5 magic")
    try:
        (magic, w, h, maxval), pos = _header_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("pgm", "non-integer header field") from None
    if w < 1 or h < 1:
        raise FormatError("pgm", f"bad dimensions {w}x{h}")
    if not 0 < maxval <= 65535:
        raise FormatError("pgm", f"maxval {maxval} outside 1..65535")
    if magic == b"P5":
        pos += 1  # single whitespace byte ends the header
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        if len(data) - pos < need:
            raise FormatError("pgm", f"payload truncated: need {need} bytes, have {max(len(data) - pos, 0)}")
        pix = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).astype(np.float64)
    else:
        fields = data[pos:].split()
        if len(fields) < w * h:
            raise FormatError("pgm", f"payload truncated: need {w * h} samples, have {len(fields)}")
        try:
            pix = np.array([int(f) for f in fields[: w * h]], dtype=np.float64)
        except ValueError:
            raise FormatError("pgm", "non-integer sample") from None
    if pix.size and pix.max() > maxval:
        raise FormatError("pgm", f"sample exceeds maxval {maxval}")
    return _ro(pix.reshape(h, w) / maxval)


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(image: np.ndarray) -> bytes:
    """Clamp to [0, 1], quantize to 0..255 (half up), emit binary P5."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x.mean(axis=0)  # channel mean for multichannel dumps
    if x.ndim != 2:
        raise ValueError(f"expected an (H, W) or (C, H, W) image, got shape {x.shape}")
    q = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode() + q.tobytes()


def save_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def load_pgm_dir(directory, classes: int | None = None) -> Dataset:
    """Every ``*.pgm`` in ``directory`` (sorted by name); ``<label>_<rest>.pgm``
    names carry the label, anything else is label 0."""
    paths = sorted(Path(directory).glob("*.pgm"))
    images, labels = [], []
    for p in paths:
        images.append(_ro(load_pgm(p)[None]))
        head = p.stem.split("_", 1)[0]
        labels.append(int(head) if head.isdigit() else 0)
    n_classes = classes or (max(labels) + 1 if labels else 1)
    return Dataset(Path(directory).name, tuple(images), tuple(labels), n_classes)


# ---------------------------------------------------------------------------
# synthetic families


def _blobs(rng: Rng, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(1 + rng.integers(4)):
        cy, cx = rng.uniform01((2,)) * (h - 1, w - 1)
        sigma = (0.12 + 0.2 * rng.uniform01(())) * max(h, w)
        amp = 0.3 + 0.7 * rng.uniform01(())
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return np.clip(img, 0.0, 1.0)


def _strokes(rng: Rng, h: int, w: int) -> np.ndarray:
    img = np.zeros((h, w))
    for _ in range(2 + rng.integers(3)):
        y0, x0, y1, x1 = rng.uniform01((4,)) * (h - 1, w - 1, h - 1, w - 1)
        steps = int(2 * max(abs(y1 - y0), abs(x1 - x0))) + 2
        t = np.linspace(0.0, 1.0, steps)
        ys = np.rint(y0 + t * (y1 - y0)).astype(int)
        xs = np.rint(x0 + t * (x1 - x0)).astype(int)
        img[ys, xs] = 1.0
        if rng.uniform01(()) < 0.5:  # some strokes two pixels wide
            img[ys, np.minimum(xs + 1, w - 1)] = 1.0
    return img


def synth(kind: str, shape, n: int, classes: int, rng: Rng) -> Dataset:
    """``n`` images of ``shape`` (C, H, W) drawn from a synthetic family.

    ``uniform_noise``: i.i.d. U(0,1) pixels.  ``gaussian_blobs``: clipped sums
    of a few isotropic Gaussians (smooth, mid-grey mass).  ``binary_strokes``:
    random line segments, every pixel exactly 0 or 1.  Labels are
    ``i % classes``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = (1, *shape)
    c, h, w = shape
    images = []
    for _ in range(n):
        if kind == "uniform_noise":
            img = rng.uniform01(shape)
        elif kind == "gaussian_blobs":
            img = np.stack([_blobs(rng, h, w) for _ in range(c)])
        else:
            img = np.broadcast_to(_strokes(rng, h, w), shape)
        images.append(_ro(img))
    return Dataset(kind, tuple(images), tuple(i % classes for i in range(n)), classes)
