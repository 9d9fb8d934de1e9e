# app/dataset.py
"""
Image corpora: binary PPM/PGM codec, CSV manifests, the resize-and-normalize
loader and the synthetic grating textures used at desk scale.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from backend.errors import DatasetIOError, DomainError, FormatError
from backend.image_ops import resize_bilinear
from backend.models import DataConfig

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["path", "class_name"]
PathLike = Union[str, Path]


# --- 1. PPM / PGM Codec ---


def _header_tokens(payload: bytes, count: int) -> Tuple[List[bytes], int]:
    """Reads ``count`` whitespace-separated header tokens, skipping '#' comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(payload) and payload[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(payload):
            raise FormatError("truncated PNM header")
        if payload[pos:pos + 1] == b"#":
            end = payload.find(b"\n", pos)
            pos = len(payload) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos:pos + 1].isspace():
            pos += 1
        tokens.append(payload[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(payload: bytes, source: str = "<bytes>") -> Tuple[np.ndarray, int]:
    """Binary P6 (RGB) or P5 (gray) to an (h, w, c) uint8/uint16 array and its maxval."""
    magic = payload[:2]
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"{source}: unsupported image magic {magic!r} (binary P6/P5 only)")
    tokens, offset = _header_tokens(payload, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{source}: malformed PNM header {tokens!r}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{source}: image dimensions {width}x{height} must be positive")
    if not 0 < maxval < 65536:
        raise FormatError(f"{source}: maxval {maxval} outside 1..65535")

    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    raster = payload[offset:offset + expected]
    if len(raster) != expected:
        raise FormatError(f"{source}: raster holds {len(raster)} bytes, header promises {expected}")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width, channels)
    return pixels.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def encode_ppm(pixels: np.ndarray) -> bytes:
    """(h, w, 3) uint8 to binary P6."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"P6 needs an (h, w, 3) array, got {pixels.shape}")
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def read_image(path: PathLike) -> np.ndarray:
    """Decodes an image file to a float32 (3, h, w) array in [0, 1]; gray is replicated."""
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read image ({e.strerror})", str(path)) from e
    pixels, maxval = decode_pnm(payload, str(path))
    image = pixels.astype(np.float32).transpose(2, 0, 1) / np.float32(maxval)
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return image


def write_ppm(path: PathLike, pixels: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(pixels))


# --- 2. Manifests ---


@dataclass
class DatasetManifest:
    root: Path
    records: List[Tuple[Path, str]]
    class_index: Dict[str, int]
    image_size: Tuple[int, int] = (0, 0)

    @property
    def class_names(self) -> List[str]:
        return sorted(self.class_index, key=self.class_index.get)

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.class_index[name] for _, name in self.records], dtype=np.int64)

    def __len__(self):
        return len(self.records)


def read_manifest(manifest_path: PathLike) -> DatasetManifest:
    """``path,class_name`` CSV; relative paths resolve against the manifest's directory."""
    manifest_path = Path(manifest_path)
    try:
        frame = pd.read_csv(manifest_path, dtype=str, keep_default_na=False)
    except FileNotFoundError as e:
        raise DatasetIOError("manifest not found", str(manifest_path)) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"{manifest_path}: unreadable manifest ({e})") from e
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise FormatError(f"{manifest_path}: manifest lacks column(s) {', '.join(missing)}")
    if frame.empty:
        raise DomainError(f"{manifest_path}: manifest lists no images")

    root = manifest_path.parent
    records = [(root / p if not Path(p).is_absolute() else Path(p), name)
               for p, name in zip(frame["path"], frame["class_name"])]
    class_index = {name: i for i, name in enumerate(sorted(set(frame["class_name"])))}
    return DatasetManifest(root=root, records=records, class_index=class_index)


def write_manifest(manifest: DatasetManifest, manifest_path: PathLike):
    manifest_path = Path(manifest_path)
    rows = []
    for path, name in manifest.records:
        try:
            rel = path.relative_to(manifest_path.parent)
        except ValueError:
            rel = path
        rows.append({"path": rel.as_posix(), "class_name": name})
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest_path, index=False)


# --- 3. Loading ---


@dataclass
class Dataset:
    """Decoded, resized and normalized images of one manifest."""

    manifest: DatasetManifest
    images: np.ndarray  # (n, 3, h, w) float32
    labels: np.ndarray  # (n,) int64
    config: DataConfig = field(default_factory=DataConfig)

    @property
    def class_names(self) -> List[str]:
        return self.manifest.class_names

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def __len__(self):
        return self.images.shape[0]


def normalize(image: np.ndarray, config: DataConfig) -> np.ndarray:
    mean = np.asarray(config.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(config.std, dtype=np.float32)[:, None, None]
    return (image - mean) / std


def load_dataset(manifest_path: PathLike, config: DataConfig = None) -> Dataset:
    """Decodes every image, resizes it bilinearly to the input size and normalizes it."""
    config = config or DataConfig()
    manifest = read_manifest(manifest_path)
    h, w = config.input_size
    logger.info("--- Loading dataset: %d images, %d classes, %dx%d ---", len(manifest), manifest.num_classes, h, w)
    images = np.empty((len(manifest), 3, h, w), dtype=np.float32)
    for i, (path, _) in enumerate(manifest.records):
        image = read_image(path)
        if image.shape[1:] != (h, w):
            image = resize_bilinear(image, h, w)
        images[i] = normalize(image, config)
    manifest.image_size = (h, w)
    return Dataset(manifest=manifest, images=images, labels=manifest.labels, config=config)


# --- 4. Synthetic Gratings ---


def grating(size: int, theta: float, cycles: float, phase: float) -> np.ndarray:
    """Sinusoidal grating in [-1, 1] with ``cycles`` periods across the image along angle ``theta``."""
    coords = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return np.sin(2 * math.pi * cycles * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)


def synth_dataset(classes: int, per_class: int, size: int, seed: int, out_dir: PathLike) -> DatasetManifest:
    """
    Writes ``classes * per_class`` P6 textures and ``manifest.csv`` under ``out_dir``.
    Class k is a grating at angle k*pi/classes with 3 + 2(k mod 5) cycles; each image draws its
    own phase, colour tint, small angle jitter and pixel noise. Same seed, same bytes.
    """
    if classes < 2:
        raise DomainError(f"synth_dataset needs at least 2 classes, got {classes}")
    if per_class < 1:
        raise DomainError(f"per_class must be >= 1, got {per_class}")
    if size < 1:
        raise DomainError(f"size must be >= 1, got {size}")

    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    names = [f"class_{k:02d}" for k in range(classes)]
    for k, name in enumerate(names):
        theta = math.pi * k / classes
        cycles = 3 + 2 * (k % 5)
        for i in range(per_class):
            jitter = rng.uniform(-0.15, 0.15) * math.pi / classes
            pattern = grating(size, theta + jitter, cycles, rng.uniform(0, 2 * math.pi))
            tint = rng.uniform(0.6, 1.0, size=3)
            noise = rng.normal(0.0, 0.08, size=(size, size, 3))
            image = 0.5 + 0.35 * pattern[:, :, None] * tint[None, None, :] + noise
            pixels = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
            path = out_dir / name / f"{name}_{i:04d}.ppm"
            write_ppm(path, pixels)
            records.append((path, name))

    manifest = DatasetManifest(root=out_dir, records=records, class_index={n: k for k, n in enumerate(names)},
                               image_size=(size, size))
    write_manifest(manifest, out_dir / "manifest.csv")
    logger.info("synthesized %d images (%d classes) in %s", len(records), classes, out_dir)
    return manifest
