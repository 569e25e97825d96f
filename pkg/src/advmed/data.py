"""Desk-scale image data: synthetic generator, patient-grouped splits, PGM/PPM and manifests."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from advmed import rng as rng_mod

IMAGE_SIZE = 32
NOISE_SIGMA = 0.05
MANIFEST_HEADER = ["image_id", "patient_id", "label", "path"]


class FormatError(ValueError):
    """Malformed or unsupported image / manifest file."""


class SplitError(ValueError):
    """A split left one side empty or single-class; retry with another seed."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # C x H x W, values in [0, 1]
    label: int
    patient_id: str
    image_id: str
    path: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3:
            raise ValueError(f"image {self.image_id!r}: pixels must be C x H x W, got {px.shape}")
        if not np.all((px >= 0.0) & (px <= 1.0)):
            raise ValueError(f"image {self.image_id!r}: pixels outside [0, 1]")
        if self.label not in (0, 1):
            raise ValueError(f"image {self.image_id!r}: label must be 0 or 1, got {self.label!r}")
        if not self.patient_id or not self.image_id:
            raise ValueError("patient_id and image_id must be nonempty")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class Dataset:
    images: tuple[LabeledImage, ...] = ()
    split: str = "unsplit"
    root: str = ""
    _ids: frozenset = field(default=frozenset(), repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        ids = [im.image_id for im in self.images]
        seen: set[str] = set()
        for i in ids:
            if i in seen:
                raise ValueError(f"duplicate image_id {i!r}")
            seen.add(i)
        object.__setattr__(self, "_ids", frozenset(seen))
        if self.split not in ("train", "test", "unsplit"):
            raise ValueError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]

    @property
    def x(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images]) if self.images else np.zeros((0, 1, 0, 0))

    @property
    def y(self) -> np.ndarray:
        return np.array([im.label for im in self.images], dtype=np.int64)

    @property
    def patients(self) -> list[str]:
        return list(dict.fromkeys(im.patient_id for im in self.images))

    def manifest(self) -> list[dict]:
        return [
            {"image_id": im.image_id, "patient_id": im.patient_id, "label": im.label, "path": im.path}
            for im in self.images
        ]


# ---------------------------------------------------------------------------
# Synthetic generator


def _patient_texture(gen: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = gen.uniform(0.39, 0.41)
    tex = np.full((size, size), base)
    for _ in range(3):
        freq = gen.uniform(0.5, 2.0)
        angle = gen.uniform(0.0, math.pi)
        phase = gen.uniform(0.0, 2 * math.pi)
        amp = gen.uniform(0.002, 0.008)
        tex += amp * np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
    return tex


def _lesions(gen: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(int(gen.integers(1, 3))):
        cy, cx = gen.uniform(5, size - 5, size=2)
        a, b = gen.uniform(4.0, 7.0, size=2)
        theta = gen.uniform(0.0, math.pi)
        amp = gen.uniform(0.03, 0.045)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
        r = np.sqrt(u * u + v * v)
        # soft edge: logistic falloff around r = 1
        out = np.maximum(out, amp / (1.0 + np.exp((r - 1.0) / 0.15)))
    return out


def generate_synthetic(n_patients: int, images_per_patient: int, seed: int) -> Dataset:
    """Two-class 32x32 grayscale images with per-patient background textures.

    Patient ``i`` image ``j`` is diseased when ``(i + j)`` is odd, which keeps
    the classes balanced to within one image per patient. Diseased images
    carry one or two bright soft-edged ellipses.
    """
    if n_patients < 2 or images_per_patient < 1:
        raise ValueError(
            f"need n_patients >= 2 and images_per_patient >= 1, got {n_patients}, {images_per_patient}"
        )
    images = []
    for p in range(n_patients):
        pid = f"p{p:04d}"
        tex = _patient_texture(rng_mod.stream(seed, "texture", p), IMAGE_SIZE)
        for j in range(images_per_patient):
            gen = rng_mod.stream(seed, "image", p, j)
            label = (p + j) % 2
            img = tex.copy()
            if label:
                img = img + _lesions(gen, IMAGE_SIZE)
            img = img + gen.normal(0.0, NOISE_SIGMA, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
            iid = f"{pid}_{j:02d}"
            images.append(LabeledImage(img[None], label, pid, iid, f"images/{iid}.pgm"))
    return Dataset(tuple(images))


def split_by_patient(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Send each patient to test independently with probability ``test_fraction``."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    patients = ds.patients
    if len(patients) < 2:
        raise SplitError("need at least two patients to split")
    gen = rng_mod.stream(seed, "split")
    draws = gen.random(len(patients))
    to_test = {pid for pid, u in zip(patients, draws) if u < test_fraction}
    train = tuple(im for im in ds.images if im.patient_id not in to_test)
    test = tuple(im for im in ds.images if im.patient_id in to_test)
    for name, side in (("train", train), ("test", test)):
        labels = {im.label for im in side}
        if labels != {0, 1}:
            raise SplitError(f"{name} split has classes {sorted(labels)}; retry with another seed")
    return Dataset(train, "train", ds.root), Dataset(test, "test", ds.root)


# ---------------------------------------------------------------------------
# PGM / PPM


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(pixels: np.ndarray) -> bytes:
    """Binary PGM (1 channel) or PPM (3 channels) bytes for a C x H x W array."""
    px = np.asarray(pixels)
    if px.ndim == 2:
        px = px[None]
    c, h, w = px.shape
    if c == 1:
        magic, payload = b"P5", quantize(px[0])
    elif c == 3:
        magic, payload = b"P6", quantize(px).transpose(1, 2, 0)
    else:
        raise FormatError(f"only 1 or 3 channels are supported, got {c}")
    return magic + b"\n%d %d\n255\n" % (w, h) + payload.tobytes()


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("malformed header: unexpected end of data")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates maxval from the raster
    if i >= n or not buf[i : i + 1].isspace():
        raise FormatError("malformed header: missing whitespace after maxval")
    return tokens, i + 1


def decode_image(buf: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic == b"P5":
        c = 1
    elif magic == b"P6":
        c = 3
    else:
        raise FormatError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed header values {tokens[1:]!r}") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"bad dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    need = w * h * c
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape(h, w)[None] if c == 1 else arr.reshape(h, w, 3).transpose(2, 0, 1)


def save_image(path: str | os.PathLike, pixels: np.ndarray) -> bytes:
    data = encode_image(pixels)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return data


def load_image(path: str | os.PathLike) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Manifest


def save_manifest(path: str | os.PathLike, ds: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in ds.manifest():
            writer.writerow([row[k] for k in MANIFEST_HEADER])


def read_manifest(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise FormatError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
        rows = []
        seen: set[str] = set()
        for row in reader:
            iid = row["image_id"]
            if iid in seen:
                raise FormatError(f"duplicate image_id {iid!r} in manifest")
            seen.add(iid)
            if row["label"] not in ("0", "1"):
                raise FormatError(f"image {iid!r}: label must be 0 or 1, got {row['label']!r}")
            rows.append({**row, "label": int(row["label"])})
    return rows


def load_manifest(path: str | os.PathLike, split: str = "unsplit") -> Dataset:
    """Load a manifest and every image it names; paths are relative to its directory."""
    path = Path(path)
    root = path.parent
    images = []
    for row in read_manifest(path):
        f = root / row["path"]
        if not f.is_file():
            raise FileNotFoundError(f"image {row['image_id']!r}: missing file {f}")
        images.append(LabeledImage(load_image(f), row["label"], row["patient_id"], row["image_id"], row["path"]))
    return Dataset(tuple(images), split, str(root))


def write_dataset(root: str | os.PathLike, ds: Dataset, manifest_name: str = "manifest.csv") -> Dataset:
    """Write every image as PGM/PPM under ``root`` plus a manifest; returns the quantized dataset."""
    root = Path(root)
    out = []
    for im in ds.images:
        rel = im.path or f"images/{im.image_id}.pgm"
        save_image(root / rel, im.pixels)
        out.append(replace(im, pixels=decode_image(encode_image(im.pixels)), path=rel))
    written = Dataset(tuple(out), ds.split, str(root))
    save_manifest(root / manifest_name, written)
    return written
