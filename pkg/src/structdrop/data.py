"""IDX-format image/label files and dataset containers.

The IDX layout is big-endian: a 4-byte magic (0x00000803 for ubyte image
tensors, 0x00000801 for ubyte label vectors), one 4-byte size per
dimension, then the raw bytes. A deterministic synthetic digit generator
provides a drop-in training corpus when no real files are available; it is
written and read through the same IDX path.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sampler import RngState

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ROOT_ENV = "STRUCTDROP_DATA_ROOT"


class IdxFormatError(ValueError):
    """IDX parse failure; `kind` is one of bad-magic, truncated-file, count-mismatch."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class Dataset:
    """Flattened images in [0, 1] with integer labels."""

    images: np.ndarray  # (n, rows*cols) float32
    labels: np.ndarray  # (n,) int64
    image_shape: tuple[int, int]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxFormatError(
                "count-mismatch",
                f"{len(self.images)} images vs {len(self.labels)} labels",
            )

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.images[start:stop], self.labels[start:stop], self.image_shape)


def _read_be32(f, path) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError("truncated-file", f"{path}: header ended early")
    return struct.unpack(">I", raw)[0]


def load_idx_images(path: str | Path) -> np.ndarray:
    """Raw uint8 image tensor (n, rows, cols) from an IDX file."""
    with open(path, "rb") as f:
        magic = _read_be32(f, path)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError("bad-magic", f"{path}: magic {magic:#010x}, want {IMAGE_MAGIC:#010x}")
        count = _read_be32(f, path)
        rows = _read_be32(f, path)
        cols = _read_be32(f, path)
        payload = f.read()
    expected = count * rows * cols
    if len(payload) < expected:
        raise IdxFormatError("truncated-file", f"{path}: {len(payload)} bytes, want {expected}")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path: str | Path) -> np.ndarray:
    """Raw uint8 label vector (n,) from an IDX file."""
    with open(path, "rb") as f:
        magic = _read_be32(f, path)
        if magic != LABEL_MAGIC:
            raise IdxFormatError("bad-magic", f"{path}: magic {magic:#010x}, want {LABEL_MAGIC:#010x}")
        count = _read_be32(f, path)
        payload = f.read()
    if len(payload) < count:
        raise IdxFormatError("truncated-file", f"{path}: {len(payload)} bytes, want {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8)


def load_mnist_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Paired image/label IDX files as a ready-to-train dataset.

    Pixels are scaled to [0, 1]; counts must agree between the two files.
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(
            "count-mismatch",
            f"{images_path} has {len(images)} images but {labels_path} has {len(labels)} labels",
        )
    n, rows, cols = images.shape
    flat = images.reshape(n, rows * cols).astype(np.float32) / 255.0
    return Dataset(flat, labels.astype(np.int64), (rows, cols))


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def resolve_data_path(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else data_root() / p


# --- synthetic digits -----------------------------------------------------

_GLYPHS = {
    0: (" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "),
    1: ("  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    2: (" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"),
    3: (" ### ", "#   #", "    #", " ### ", "    #", "#   #", " ### "),
    4: ("   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "),
    5: ("#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "),
    6: ("  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "),
    7: ("#####", "    #", "   # ", "  #  ", "  #  ", " #   ", " #   "),
    8: (" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "),
    9: (" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "),
}
_GLYPH_SCALE = 3  # 5x7 glyphs become 15x21
_MAX_OFFSET = 4
_SHEAR_MAX = 1
_BRIGHT_LO = 200


def _glyph_bitmap(digit: int) -> np.ndarray:
    rows = _GLYPHS[digit]
    bitmap = np.array([[c == "#" for c in row] for row in rows], dtype=np.float32)
    return np.kron(bitmap, np.ones((_GLYPH_SCALE, _GLYPH_SCALE), dtype=np.float32))


def make_synthetic_digits(n: int, seed: int, image_size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 28x28 digit images on a clean background.

    Each image places one scaled glyph with a small random offset, a one
    column shear, and per-image brightness. Classes are balanced and
    shuffled; identical (n, seed) always produce identical bytes. Returns
    (images uint8 (n, s, s), labels uint8 (n,)).
    """
    rng = RngState(seed, stream=0)
    glyphs = {d: _glyph_bitmap(d) for d in range(10)}
    gh, gw = glyphs[0].shape

    labels = np.arange(n, dtype=np.uint8) % 10
    order = np.argsort(rng.uniforms(n), kind="stable")
    labels = labels[order]

    images = np.zeros((n, image_size, image_size), dtype=np.uint8)
    max_ro = min(image_size - gh, _MAX_OFFSET)
    max_co = min(image_size - gw, _MAX_OFFSET)
    for i in range(n):
        u = rng.uniforms(6)
        ro = int(u[0] * (max_ro + 1))
        co = int(u[1] * (max_co + 1))
        shear = int(u[2] * (2 * _SHEAR_MAX + 1)) - _SHEAR_MAX
        brightness = _BRIGHT_LO + u[3] * (255.0 - _BRIGHT_LO)

        canvas = np.zeros((image_size, image_size), dtype=np.float32)
        glyph = glyphs[int(labels[i])]
        for r in range(gh):
            shift = co + round(shear * r / (gh - 1))
            shift = min(max(shift, 0), image_size - gw)
            canvas[ro + r, shift:shift + gw] = glyph[r] * brightness
        images[i] = canvas.astype(np.uint8)
    return images, labels


def synthetic_dataset(n: int, seed: int) -> Dataset:
    images, labels = make_synthetic_digits(n, seed)
    flat = images.reshape(n, -1).astype(np.float32) / 255.0
    return Dataset(flat, labels.astype(np.int64), images.shape[1:])
