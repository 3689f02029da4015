"""Data ingestion, patch streaming, synthetic generators, and persistence.

Rasters come in as PNG (via Pillow) or binary PPM/PGM (parsed natively, which
also covers 16-bit depths exactly).  Tabular interchange is plain CSV; models
and configs are JSON.  All file writes go through a write-temp-then-rename
helper so readers never observe partial output.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import AmbiguousMaskError, FormatError, ParameterError, ShapeError
from .feature_map import FeatureMapSpec
from .linear_model import LabeledBatch, TrainConfig


@dataclass
class PixelDataset:
    """Row-major RGB pixels scaled to [0, 1]."""

    rows: np.ndarray  # (H*W, 3) float64
    shape: tuple[int, int]  # (height, width)
    source: str | None = None

    def __post_init__(self):
        h, w = self.shape
        if self.rows.shape != (h * w, 3):
            raise ShapeError(f"rows shape {self.rows.shape} does not match image shape {self.shape}")

    def image(self) -> np.ndarray:
        """(H, W, 3) view of the pixel rows."""
        h, w = self.shape
        return self.rows.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# PNM (PPM/PGM) parsing: covers 8- and 16-bit depths exactly
# ---------------------------------------------------------------------------

def _read_pnm(path: Path) -> tuple[np.ndarray, int]:
    """Return (array of shape (H, W) or (H, W, 3), maxval) for binary P5/P6."""
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: file does not exist") from None
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    channels = 3 if data[:2] == b"P6" else 1

    # tokenize header: magic, width, height, maxval; '#' starts a comment
    pos = 2
    tokens: list[int] = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header")
        tokens.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = tokens
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raw.size != count:
        raise FormatError(f"{path}: pixel payload shorter than header promises")
    arr = raw.reshape((height, width, channels) if channels == 3 else (height, width))
    return arr.astype(np.int64), maxval


def _write_pnm(path: Path, arr: np.ndarray, maxval: int) -> None:
    channels = arr.shape[2] if arr.ndim == 3 else 1
    magic = b"P6" if channels == 3 else b"P5"
    header = magic + f"\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    atomic_write_bytes(path, header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _load_raster(path: Path) -> tuple[np.ndarray, int]:
    """(integer array, maxval); shape (H, W) for single-channel, (H, W, 3) for RGB."""
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return _read_pnm(path)
    try:
        with Image.open(path) as img:
            if img.mode == "RGB":
                return np.asarray(img, dtype=np.int64), 255
            if img.mode == "L":
                return np.asarray(img, dtype=np.int64), 255
            if img.mode in ("I;16", "I"):
                return np.asarray(img, dtype=np.int64), 65535
            raise FormatError(f"{path}: unsupported image mode {img.mode!r}")
    except UnidentifiedImageError:
        raise FormatError(f"{path}: not a readable PNG/PPM raster") from None
    except FileNotFoundError:
        raise FormatError(f"{path}: file does not exist") from None


def load_image(path) -> PixelDataset:
    """Read an RGB raster and scale channels by the bit-depth maximum."""
    path = Path(path)
    arr, maxval = _load_raster(path)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"{path}: expected a 3-channel image, got shape {arr.shape}")
    rows = (arr.astype(float) / maxval).reshape(-1, 3)
    return PixelDataset(rows=rows, shape=(arr.shape[0], arr.shape[1]), source=str(path))


def save_image(dataset: PixelDataset | np.ndarray, path, bit_depth: int = 16) -> None:
    """Write pixels in [0, 1] to PPM (8- or 16-bit) or PNG (8-bit)."""
    path = Path(path)
    img = dataset.image() if isinstance(dataset, PixelDataset) else np.asarray(dataset, dtype=float)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) pixels, got shape {img.shape}")
    if path.suffix.lower() == ".png":
        quant = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        _write_pil(path, Image.fromarray(quant, mode="RGB"))
        return
    maxval = 65535 if bit_depth == 16 else 255
    quant = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.int64)
    _write_pnm(path, quant, maxval)


def load_mask(path) -> tuple[np.ndarray, tuple[int, int]]:
    """Read a single-channel {0, max} raster as a flat 0/1 label vector."""
    path = Path(path)
    arr, maxval = _load_raster(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel mask, got shape {arr.shape}")
    values = np.unique(arr)
    if not np.isin(values, (0, maxval)).all():
        bad = values[~np.isin(values, (0, maxval))]
        raise AmbiguousMaskError(
            f"{path}: mask holds gray values {bad[:5].tolist()} besides 0 and {maxval}"
        )
    return (arr == maxval).astype(np.int8).reshape(-1), (arr.shape[0], arr.shape[1])


def save_mask(labels, shape: tuple[int, int], path) -> None:
    """Write a flat 0/1 vector as a {0, 255} single-channel raster."""
    path = Path(path)
    arr = np.asarray(labels).reshape(shape)
    quant = np.where(arr > 0, 255, 0).astype(np.uint8)
    if path.suffix.lower() == ".png":
        _write_pil(path, Image.fromarray(quant, mode="L"))
    else:
        _write_pnm(path, quant.astype(np.int64), 255)


def _write_pil(path: Path, img: Image.Image) -> None:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Patch streaming
# ---------------------------------------------------------------------------

def patch_stream(dataset: PixelDataset, mask, side: int = 100) -> Iterator[LabeledBatch]:
    """Tile the image row-major into side x side patches; edge tiles truncate.

    Concatenating the yielded batches reproduces the full pixel list in order
    of tiles (left to right, top to bottom).
    """
    if side < 1:
        raise ParameterError(f"patch side must be >= 1, got {side}")
    labels = np.asarray(mask).reshape(-1)
    h, w = dataset.shape
    if labels.size != h * w:
        raise ShapeError(f"mask has {labels.size} entries for a {h}x{w} image")
    img = dataset.image()
    grid = labels.reshape(h, w)
    for r0 in range(0, h, side):
        for c0 in range(0, w, side):
            block = img[r0 : r0 + side, c0 : c0 + side]
            yield LabeledBatch(
                block.reshape(-1, 3), grid[r0 : r0 + side, c0 : c0 + side].reshape(-1)
            )


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("blobs", "annulus", "xor")


def synth_generate(kind: str, n: int, noise: float = 0.05, seed: int = 42):
    """Labeled 2-D toy data: linearly separable blobs, a disk-in-ring annulus
    (separable by a degree-2 map but not linearly), or quadrant xor blobs.

    Returns ``(X, y)`` with ``X`` of shape (n, 2) and binary ``y``; the same
    seed always reproduces the same rows.
    """
    if kind not in SYNTH_KINDS:
        raise ParameterError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < 4:
        raise ParameterError(f"need n >= 4, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    if kind == "blobs":
        x0 = rng.normal((-1.0, 0.0), noise, (n - half, 2))
        x1 = rng.normal((1.0, 0.0), noise, (half, 2))
        points = np.vstack([x0, x1])
        labels = np.r_[np.zeros(n - half, dtype=np.int8), np.ones(half, dtype=np.int8)]
    elif kind == "annulus":
        # class 1: uniform disk of radius 1; class 0: uniform ring radii [1.5, 2]
        r_in = np.sqrt(rng.uniform(0.0, 1.0, half))
        r_out = np.sqrt(rng.uniform(1.5**2, 2.0**2, n - half))
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        radius = np.r_[r_in, r_out]
        points = np.c_[radius * np.cos(theta), radius * np.sin(theta)]
        points += rng.normal(0.0, noise, points.shape)
        labels = np.r_[np.ones(half, dtype=np.int8), np.zeros(n - half, dtype=np.int8)]
    else:  # xor
        centers = np.array([(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)])
        which = rng.integers(0, 4, n)
        points = centers[which] + rng.normal(0.0, noise, (n, 2))
        labels = (centers[which, 0] * centers[which, 1] < 0).astype(np.int8)
    order = rng.permutation(n)
    return points[order], labels[order]


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def load_table(path) -> tuple[np.ndarray, list[str] | None]:
    """Read a CSV of numbers; a non-numeric first row is kept as the header."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FormatError(f"{path}: file does not exist") from None
    rows = [r for r in csv.reader(text.splitlines()) if r]
    if not rows:
        raise FormatError(f"{path}: empty table")
    header: list[str] | None = None
    try:
        [float(cell) for cell in rows[0]]
    except ValueError:
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
    try:
        arr = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric cell ({exc})") from None
    if arr.ndim != 2:
        raise FormatError(f"{path}: rows have inconsistent lengths")
    return arr, header


def save_table(path, array, header: Sequence[str] | None = None) -> None:
    """Write a numeric table as CSV with 17 significant digits per cell."""
    arr = np.asarray(array, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for row in arr:
        lines.append(",".join(f"{v:.17g}" for v in row))
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Atomic writes, thread budget, run config
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, payload: str) -> None:
    atomic_write_bytes(path, payload.encode())


def write_json(path, obj) -> None:
    atomic_write_text(Path(path), json.dumps(obj, indent=2) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: file does not exist") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def thread_budget() -> int:
    """Parallelism cap from EFMKIT_THREADS; defaults to the CPU count."""
    raw = os.environ.get("EFMKIT_THREADS", "").strip()
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ParameterError(f"EFMKIT_THREADS must be an integer, got {raw!r}") from None
        if value >= 1:
            return value
    return os.cpu_count() or 1


PREFILTERS = ("none", "median3")


def prefilter_median3(dataset: PixelDataset) -> PixelDataset:
    """3x3 median filter applied per channel; a cheap denoising hook."""
    from .clustering import median_filter  # local import keeps module graph acyclic

    img = dataset.image()
    out = np.stack([median_filter(img[:, :, ch], window=3) for ch in range(3)], axis=2)
    return PixelDataset(rows=out.reshape(-1, 3), shape=dataset.shape, source=dataset.source)


@dataclass
class RunConfig:
    """End-to-end run settings mirroring the CLI flags."""

    map_spec: FeatureMapSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: str = "logistic"
    clusters: int = 2
    anchors: int = 75
    knn: int = 3
    prefilter: str = "none"
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.prefilter not in PREFILTERS:
            raise ParameterError(f"prefilter must be one of {PREFILTERS}, got {self.prefilter!r}")


def load_run_config(path) -> RunConfig:
    """Parse a JSON run config; every referenced path must exist."""
    obj = read_json(path)
    try:
        config = RunConfig(
            map_spec=None if obj.get("map_spec") is None else FeatureMapSpec.from_json(obj["map_spec"]),
            train=TrainConfig(**obj.get("train", {})),
            loss=obj.get("loss", "logistic"),
            clusters=int(obj.get("clusters", 2)),
            anchors=int(obj.get("anchors", 75)),
            knn=int(obj.get("knn", 3)),
            prefilter=obj.get("prefilter", "none"),
            paths={k: str(v) for k, v in obj.get("paths", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(f"{path}: invalid run config ({exc})") from None
    missing = [f"{k}={v}" for k, v in config.paths.items() if not Path(v).exists()]
    if missing:
        raise ParameterError(f"run config references missing paths: {', '.join(missing)}")
    return config
