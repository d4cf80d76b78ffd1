"""C-MNIST construction, IDX parsing, a synthetic fallback and dataset archives.

Layout of every composite image (1 x 64 x 64)::

    rows 18..45    : the two 28x28 digits
    cols  4..31    : left digit  (label source, salient)
    cols 32..59    : right digit (distractor, attackable)

The region mask is 1 exactly on rows 18..45 x cols 32..59.
"""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

IMAGE_SIZE = 64
DIGIT = 28
PAD_ROWS = (IMAGE_SIZE - DIGIT) // 2          # 18 top, 18 bottom
PAD_COLS = (IMAGE_SIZE - 2 * DIGIT) // 2      # 4 left, 4 right
LEFT_COLS = (PAD_COLS, PAD_COLS + DIGIT)      # [4, 32)
RIGHT_COLS = (PAD_COLS + DIGIT, PAD_COLS + 2 * DIGIT)  # [32, 60)
ROWS = (PAD_ROWS, PAD_ROWS + DIGIT)           # [18, 46)

ARCHIVE_HEADER = b"HSPLID-DS-v1"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------- IDX


def parse_idx(data: bytes) -> np.ndarray:
    """Parse an MNIST IDX payload.

    Images (magic 0x803) come back as float32 ``(N, H, W)`` scaled to [0, 1];
    labels (magic 0x801) as int64 ``(N,)``.
    """
    if len(data) < 8:
        raise DatasetError("truncated IDX header")
    magic, count = struct.unpack(">II", data[:8])
    if magic == IDX_IMAGES:
        if len(data) < 16:
            raise DatasetError("truncated IDX header")
        rows, cols = struct.unpack(">II", data[8:16])
        need = count * rows * cols
        body = data[16:]
        if len(body) < need:
            raise DatasetError(f"truncated payload: header promises {count} images, got {len(body) // max(rows * cols, 1)}")
        arr = np.frombuffer(body, dtype=np.uint8, count=need).reshape(count, rows, cols)
        return arr.astype(np.float32) / 255.0
    if magic == IDX_LABELS:
        body = data[8:]
        if len(body) < count:
            raise DatasetError(f"truncated payload: header promises {count} labels, got {len(body)}")
        return np.frombuffer(body, dtype=np.uint8, count=count).astype(np.int64)
    raise DatasetError(f"bad magic number 0x{magic:08x}")


def write_idx(arr: np.ndarray) -> bytes:
    """Serialize uint8 images ``(N, H, W)`` or labels ``(N,)`` to IDX bytes."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.rint(np.clip(arr, 0, 1) * 255)
        arr = arr.astype(np.uint8)
    if arr.ndim == 3:
        head = struct.pack(">IIII", IDX_IMAGES, *arr.shape)
    elif arr.ndim == 1:
        head = struct.pack(">II", IDX_LABELS, len(arr))
    else:
        raise DatasetError("IDX writer takes (N, H, W) images or (N,) labels")
    return head + np.ascontiguousarray(arr).tobytes()


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def _find(root: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / cand).exists():
            return root / cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {root}")


def load_mnist_dir(root) -> dict:
    """Load the four standard MNIST IDX files (optionally gzipped)."""
    root = Path(root)
    out = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = read_idx_file(_find(root, f"{prefix}-images-idx3-ubyte"))
        labels = read_idx_file(_find(root, f"{prefix}-labels-idx1-ubyte"))
        if len(images) != len(labels):
            raise DatasetError(f"{split}: {len(images)} images but {len(labels)} labels")
        out[split] = (images, labels)
    return out


# ----------------------------------------------------------------- containers


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: int
    region_mask: np.ndarray


@dataclass
class ImageSet:
    """A stack of labelled 1x64x64 images with per-sample region masks."""

    images: np.ndarray            # float32 (N, 1, H, W) in [0, 1]
    labels: np.ndarray            # int64 (N,)
    region_masks: np.ndarray      # uint8 (N, H, W), 1 = attackable
    distractors: Optional[np.ndarray] = None  # right-digit labels, if known

    def __post_init__(self):
        n = len(self.images)
        if len(self.labels) != n or len(self.region_masks) != n:
            raise DatasetError("images, labels and masks differ in length")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), self.region_masks[i])

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(
            self.images[idx],
            self.labels[idx],
            self.region_masks[idx],
            None if self.distractors is None else self.distractors[idx],
        )

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass
class DatasetSplit:
    train: ImageSet
    val: ImageSet
    test: ImageSet
    split_seed: int = 0
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(np.ascontiguousarray(part.images).tobytes())
            h.update(np.ascontiguousarray(part.labels).tobytes())
            h.update(np.ascontiguousarray(part.region_masks).tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ geometry


def right_region_mask() -> np.ndarray:
    m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    m[ROWS[0]:ROWS[1], RIGHT_COLS[0]:RIGHT_COLS[1]] = 1
    return m


def left_region_mask() -> np.ndarray:
    m = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    m[ROWS[0]:ROWS[1], LEFT_COLS[0]:LEFT_COLS[1]] = 1
    return m


def compose_pairs(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Place 28x28 digit pairs side by side in zero-padded 64x64 frames."""
    n = len(left)
    out = np.zeros((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    out[:, 0, ROWS[0]:ROWS[1], LEFT_COLS[0]:LEFT_COLS[1]] = left
    out[:, 0, ROWS[0]:ROWS[1], RIGHT_COLS[0]:RIGHT_COLS[1]] = right
    return out


def _pair_up(images, labels, rng) -> ImageSet:
    if len(images) == 0:
        raise DatasetError("empty source")
    partner = rng.integers(0, len(images), size=len(images))
    pixels = compose_pairs(images, images[partner])
    masks = np.broadcast_to(right_region_mask(), (len(images), IMAGE_SIZE, IMAGE_SIZE)).copy()
    return ImageSet(pixels, np.asarray(labels, dtype=np.int64), masks,
                    np.asarray(labels, dtype=np.int64)[partner])


def train_val_split(n: int, seed: int, val_fraction: float = 0.2):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _assemble(train_src, test_src, pair_seed, split_seed, val_fraction, meta) -> DatasetSplit:
    rng = np.random.default_rng(pair_seed)
    full_train = _pair_up(*train_src, rng)
    test = _pair_up(*test_src, rng)
    tr, va = train_val_split(len(full_train), split_seed, val_fraction)
    meta = dict(meta)
    meta.update(
        pair_seed=pair_seed,
        split_seed=split_seed,
        val_fraction=val_fraction,
        layout={"rows": list(ROWS), "left_cols": list(LEFT_COLS), "right_cols": list(RIGHT_COLS),
                "padding": "18 rows top/bottom, 4 cols left/right"},
    )
    return DatasetSplit(full_train.subset(tr), full_train.subset(va), test, split_seed, meta)


def build_cmnist(mnist: dict, pair_seed: int = 0, split_seed: int = 0,
                 val_fraction: float = 0.2, limit: Optional[int] = None) -> DatasetSplit:
    """Concatenated-MNIST from ``{"train": (imgs, labels), "test": (imgs, labels)}``.

    Each sample is paired with a random partner (possibly itself); the label
    is the left digit.  ``limit`` truncates each source split (for quick runs).
    """
    tr_img, tr_lab = mnist["train"]
    te_img, te_lab = mnist["test"]
    if limit is not None:
        tr_img, tr_lab = tr_img[:limit], tr_lab[:limit]
        te_img, te_lab = te_img[:limit], te_lab[:limit]
    return _assemble((tr_img, tr_lab), (te_img, te_lab), pair_seed, split_seed,
                     val_fraction, {"source": "mnist"})


# ---------------------------------------------------------------- synthetic


def _glyph(cls: int) -> np.ndarray:
    g = np.zeros((DIGIT, DIGIT), dtype=np.float32)
    c = slice(11, 17)
    if cls == 0:
        g[4:24, c] = 1                                  # vertical bar
    elif cls == 1:
        g[c, 4:24] = 1                                  # horizontal bar
    elif cls == 2:
        g[4:24, c] = 1; g[c, 4:24] = 1                  # plus
    elif cls == 3:
        idx = np.arange(4, 24); g[idx, idx] = 1; g[idx[:-1], idx[1:]] = 1; g[idx[1:], idx[:-1]] = 1
    elif cls == 4:
        g[6:22, 6:22] = 1                               # filled block
    elif cls == 5:
        g[4:24, 4:24] = 1; g[8:20, 8:20] = 0            # hollow square
    elif cls == 6:
        g[4:14, 4:14] = 1; g[14:24, 14:24] = 1          # checker
    elif cls == 7:
        g[4:24, 4:9] = 1; g[4:24, 19:24] = 1            # two bars
    elif cls == 8:
        g[4:9, 4:24] = 1; g[19:24, 4:24] = 1            # two rails
    else:
        idx = np.arange(4, 24); g[idx, 27 - idx] = 1; g[idx, idx] = 1  # cross
    return g


def _render(classes, rng, noise: float = 0.15) -> np.ndarray:
    base = np.stack([_glyph(int(c)) for c in classes])
    shift = rng.integers(-2, 3, size=(len(classes), 2))
    out = np.empty_like(base)
    for i, (dy, dx) in enumerate(shift):
        out[i] = np.roll(base[i], (dy, dx), axis=(0, 1))
    out = out * rng.uniform(0.7, 1.0, size=(len(classes), 1, 1)) + noise * rng.random(out.shape)
    return np.clip(out, 0, 1).astype(np.float32)


def build_synthetic_shapes(n_per_class: int, k: int = 10, seed: int = 0,
                           val_fraction: float = 0.2) -> DatasetSplit:
    """Self-contained C-MNIST stand-in: class glyph left, random glyph right.

    The right glyph's class is drawn uniformly and independently of the
    label.  Test set size is a quarter of the train pool.
    """
    if not 1 <= k <= 10:
        raise DatasetError("k must be between 1 and 10")
    rng = np.random.default_rng(seed)

    def source(n_each):
        labels = np.repeat(np.arange(k), n_each)
        return labels

    tr_lab = source(n_per_class)
    te_lab = source(max(1, n_per_class // 4))
    tr_img = _render(tr_lab, rng)
    te_img = _render(te_lab, rng)
    # right glyphs come from independent uniform classes
    tr_dis = rng.integers(0, k, size=len(tr_lab))
    te_dis = rng.integers(0, k, size=len(te_lab))
    tr_right = _render(tr_dis, rng)
    te_right = _render(te_dis, rng)

    def make(img, lab, right, dis):
        masks = np.broadcast_to(right_region_mask(), (len(img), IMAGE_SIZE, IMAGE_SIZE)).copy()
        return ImageSet(compose_pairs(img, right), lab.astype(np.int64), masks, dis.astype(np.int64))

    full_train = make(tr_img, tr_lab, tr_right, tr_dis)
    test = make(te_img, te_lab, te_right, te_dis)
    tr, va = train_val_split(len(full_train), seed, val_fraction)
    meta = {"source": "synthetic", "k": k, "n_per_class": n_per_class, "seed": seed,
            "layout": {"rows": list(ROWS), "left_cols": list(LEFT_COLS), "right_cols": list(RIGHT_COLS),
                       "padding": "18 rows top/bottom, 4 cols left/right"}}
    return DatasetSplit(full_train.subset(tr), full_train.subset(va), test, seed, meta)


# ------------------------------------------------------------------ archive


def save_archive(split: DatasetSplit, path) -> str:
    """Write ``split`` as HSPLID-DS-v1; returns the content digest.

    Layout: header line, 8-byte little-endian JSON length, JSON metadata,
    then per part (train, val, test): float32 images, int64 labels, uint8
    masks, int64 distractors (-1 when unknown).
    """
    digest = split.digest()
    parts = {}
    for name in ("train", "val", "test"):
        s = getattr(split, name)
        parts[name] = {"n": len(s), "shape": list(s.images.shape[1:])}
    meta = {"meta": split.meta, "split_seed": split.split_seed, "parts": parts, "sha256": digest}
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_HEADER + b"\n")
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in ("train", "val", "test"):
            s = getattr(split, name)
            fh.write(np.ascontiguousarray(s.images, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(s.region_masks, dtype=np.uint8).tobytes())
            dis = s.distractors if s.distractors is not None else np.full(len(s), -1)
            fh.write(np.ascontiguousarray(dis, dtype="<i8").tobytes())
    return digest


def load_archive(path) -> DatasetSplit:
    raw = Path(path).read_bytes()
    head = ARCHIVE_HEADER + b"\n"
    if not raw.startswith(head):
        raise DatasetError("not an HSPLID-DS-v1 archive")
    off = len(head)
    (n_json,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    meta = json.loads(raw[off:off + n_json])
    off += n_json
    sets = {}
    for name in ("train", "val", "test"):
        n = meta["parts"][name]["n"]
        shape = meta["parts"][name]["shape"]
        pix = int(np.prod(shape))
        images = np.frombuffer(raw, "<f4", n * pix, off).reshape(n, *shape).astype(np.float32)
        off += 4 * n * pix
        labels = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
        off += 8 * n
        hw = shape[1] * shape[2]
        masks = np.frombuffer(raw, np.uint8, n * hw, off).reshape(n, shape[1], shape[2]).copy()
        off += n * hw
        dis = np.frombuffer(raw, "<i8", n, off).astype(np.int64)
        off += 8 * n
        sets[name] = ImageSet(images, labels, masks, None if (dis < 0).all() else dis)
    split = DatasetSplit(sets["train"], sets["val"], sets["test"], meta["split_seed"], meta["meta"])
    if split.digest() != meta["sha256"]:
        raise DatasetError("archive digest mismatch")
    return split
