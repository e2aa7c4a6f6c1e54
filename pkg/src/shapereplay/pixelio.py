"""Binary PPM/PGM image IO and flat dataset export.

Images travel as binary PPM (P6, maxval 255), label maps as binary PGM
(P5, maxval 255). export_dataset writes numbered pairs plus a manifest.csv
tying them together; import_dataset reads the manifest back. Round trips
are exact at 8-bit resolution.
"""

from __future__ import annotations

import csv
import os

import numpy as np


def _read_header(f, magic: bytes):
    got = f.read(2)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    fields = []
    while len(fields) < 3:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        body = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in body.split())
    width, height, maxval = fields[:3]
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return width, height


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a float image in [0, 1] of shape (H, W, 3) as binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    data = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into a float32 (H, W, 3) image in [0, 1]."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"expected {w * h * 3} pixel bytes, got {len(raw)}")
    return (np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float32)) / 255.0


def write_pgm(path: str, labels: np.ndarray) -> None:
    """Write an integer label map of shape (H, W) as binary PGM."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("labels must be (H, W)")
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label ids must fit in 0..255")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(labels.astype(np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM into an int16 (H, W) label map."""
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"expected {w * h} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.int16)


def export_dataset(directory: str, images: np.ndarray, labels: np.ndarray, extra_columns: dict | None = None) -> str:
    """Write image/label pairs and a manifest.csv; returns the manifest path.

    extra_columns maps column name -> per-sample sequence (for step indices,
    source tags and similar bookkeeping).
    """
    if len(images) != len(labels):
        raise ValueError("images and labels must have equal length")
    extra_columns = extra_columns or {}
    for name, col in extra_columns.items():
        if len(col) != len(images):
            raise ValueError(f"extra column {name!r} has wrong length")
    os.makedirs(directory, exist_ok=True)
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "image", "label", *extra_columns.keys()])
        for i in range(len(images)):
            img_name = f"sample_{i:05d}.ppm"
            lab_name = f"sample_{i:05d}.pgm"
            write_ppm(os.path.join(directory, img_name), images[i])
            write_pgm(os.path.join(directory, lab_name), labels[i])
            writer.writerow([i, img_name, lab_name, *(extra_columns[k][i] for k in extra_columns)])
    return manifest


def import_dataset(directory: str) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Read back an exported dataset; returns (images, labels, manifest rows)."""
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"empty manifest in {directory}")
    images = np.stack([read_ppm(os.path.join(directory, r["image"])) for r in rows])
    labels = np.stack([read_pgm(os.path.join(directory, r["label"])) for r in rows])
    return images, labels, rows
