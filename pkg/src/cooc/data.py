"""Datasets: a synthetic motif corpus, flat binary records, image folders.

The binary layout follows the classic small-image convention: each record is
one label byte followed by the red, green and blue planes, row-major. The
synthetic corpus gives every class a distinctive small motif stamped at a
few random positions over a smooth background, so class identity lives in
local texture rather than global layout. That makes it a good desk-scale
stand-in for co-occurrence pretraining: crops of one image share motifs.
"""

from __future__ import annotations

import os

import numpy as np

NUM_CLASSES = 10
MOTIF = 7  # motif patch side in pixels


# ---------------------------------------------------------------------------
# binary records
# ---------------------------------------------------------------------------

def write_records(path, images, labels):
    """Write uint8 HWC images and integer labels as flat binary records."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8:
        raise ValueError("images must be uint8")
    if images.ndim != 4 or images.shape[3] != 3 or images.shape[1] != images.shape[2]:
        raise ValueError(f"expected N x S x S x 3 images, got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ValueError("one label per image required")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must fit in one byte")
    planes = images.transpose(0, 3, 1, 2)  # N x 3 x S x S
    with open(path, "wb") as fh:
        for img, lab in zip(planes, labels):
            fh.write(bytes([int(lab)]))
            fh.write(img.tobytes())


def read_records(path, image_size=32):
    """Read flat binary records back as float images in [0, 1] plus labels."""
    record = 1 + 3 * image_size * image_size
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % record != 0:
        raise ValueError(
            f"{path}: size {raw.size} is not a multiple of the {record}-byte record"
        )
    raw = raw.reshape(-1, record)
    labels = raw[:, 0].astype(np.int64)
    planes = raw[:, 1:].reshape(-1, 3, image_size, image_size)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return images, labels


# ---------------------------------------------------------------------------
# synthetic motif corpus
# ---------------------------------------------------------------------------

def _motif_bank():
    """One binary 7x7 stencil per class."""
    s = MOTIF
    yy, xx = np.indices((s, s))
    c = s // 2
    bank = [
        xx % 2 == 0,                                   # vertical stripes
        yy % 2 == 0,                                   # horizontal stripes
        (xx + yy) % 2 == 0,                            # checkerboard
        xx == yy,                                      # main diagonal
        xx + yy == s - 1,                              # anti-diagonal
        (xx == c) | (yy == c),                         # cross
        (abs(xx - c) + abs(yy - c)) == c,              # diamond ring
        (xx == 0) | (yy == 0) | (xx == s - 1) | (yy == s - 1),  # frame
        (yy == 0) | (xx == c),                         # T shape
        ((xx - c) ** 2 + (yy - c) ** 2) <= (c - 1) ** 2,  # filled disc
    ]
    return [m.astype(np.float64) for m in bank]


_COLORS = np.array(
    [
        [1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.4, 1.0], [1.0, 1.0, 0.2],
        [1.0, 0.3, 1.0], [0.2, 1.0, 1.0], [1.0, 0.6, 0.2], [0.6, 0.3, 1.0],
        [0.5, 1.0, 0.6], [1.0, 0.8, 0.6],
    ]
)


def _background(size, rng):
    gy, gx = rng.uniform(-0.25, 0.25, size=2)
    base = rng.uniform(0.25, 0.55)
    ramp = np.linspace(0.0, 1.0, size)
    field = base + gy * ramp[:, None] + gx * ramp[None, :]
    img = np.repeat(field[..., None], 3, axis=2)
    img += rng.normal(0.0, 0.04, size=(size, size, 3))
    return img


def make_image(label, rng, size=32, stamps=(4, 7)):
    """One synthetic image of the given class as float HWC in [0, 1]."""
    if not 0 <= label < NUM_CLASSES:
        raise ValueError(f"label must be in [0, {NUM_CLASSES}), got {label}")
    img = _background(size, rng)
    motif = _motif_bank()[label][..., None] * _COLORS[label]
    count = int(rng.integers(stamps[0], stamps[1] + 1))
    for _ in range(count):
        top = int(rng.integers(0, size - MOTIF + 1))
        left = int(rng.integers(0, size - MOTIF + 1))
        patch = img[top : top + MOTIF, left : left + MOTIF]
        mask = motif[..., :1] > 0
        patch[...] = np.where(mask, 0.15 + 0.85 * motif, patch)
    return np.clip(img, 0.0, 1.0)


def make_toy_dataset(n_per_class, rng, size=32):
    """Balanced, shuffled corpus: uint8 HWC images plus labels."""
    images, labels = [], []
    for label in range(NUM_CLASSES):
        for _ in range(n_per_class):
            images.append(make_image(label, rng, size=size))
            labels.append(label)
    images = np.stack(images)
    labels = np.array(labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    images = (images[order] * 255.0 + 0.5).astype(np.uint8)
    return images, labels[order]


# ---------------------------------------------------------------------------
# image folders
# ---------------------------------------------------------------------------

def load_image_folder(root, image_size=32):
    """Class-per-subdirectory image tree -> float images in [0, 1], labels, names.

    Images are resized (bilinear) to ``image_size`` squares.
    """
    from PIL import Image

    from .augment import bilinear_resize

    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise ValueError(f"{root}: no class subdirectories found")
    images, labels = [], []
    for idx, name in enumerate(classes):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            fpath = os.path.join(folder, fname)
            try:
                with Image.open(fpath) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except OSError:
                continue
            images.append(bilinear_resize(arr, image_size, image_size))
            labels.append(idx)
    if not images:
        raise ValueError(f"{root}: no readable images")
    return np.stack(images), np.array(labels, dtype=np.int64), classes
