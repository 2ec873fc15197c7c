"""Datasets: synthetic oriented-grating images, IDX/CSV readers, augmentation."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import make_rng


class ParseError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # N×C×H×W in [0, 1]
    labels: np.ndarray | None   # N ints in [0, n_classes)
    train_idx: np.ndarray
    test_idx: np.ndarray
    name: str
    n_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ValueError("labels must have one entry per image")
            if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError(f"labels outside [0, {self.n_classes})")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test splits overlap")

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def split(self, which: str = "train"):
        idx = self.train_idx if which == "train" else self.test_idx
        labels = None if self.labels is None else self.labels[idx]
        return self.images[idx], labels


def random_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = make_rng(seed, "split").permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# Cycles per pixel of the two grating frequencies.
_FREQS = (0.17, 0.33)


def class_prototypes(n_classes: int, family_seed: int = 0, label_seed: int | None = None):
    """(orientation, frequency) per class; ``label_seed`` permutes the assignment."""
    n_orient = math.ceil(n_classes / len(_FREQS))
    fam = make_rng(family_seed, "synth-family")
    offset = fam.uniform(0, math.pi / n_orient)
    protos = [(offset + math.pi * (c % n_orient) / n_orient, _FREQS[c // n_orient])
              for c in range(n_classes)]
    if label_seed is not None:
        order = make_rng(label_seed, "synth-labels").permutation(n_classes)
        protos = [protos[i] for i in order]
    return protos


def _grating(xx, yy, theta, freq, phase):
    proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
    return np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])


def synth_dataset(n: int, n_classes: int, resolution: int, seed: int, *,
                  variant: str = "base", family_seed: int = 0, label_seed: int | None = None,
                  test_fraction: float = 0.2, channels: int = 3, noise: float = 0.15,
                  amplitude: tuple = (0.1, 0.3), distractor: float = 0.2,
                  name: str | None = None) -> Dataset:
    """Class-conditional oriented gratings with random phase, color and noise.

    A class is an (orientation, spatial frequency) pair, so the label is
    recoverable from the translation-invariant amplitude spectrum while color
    carries no class information. ``variant="shifted"`` changes the color and
    noise statistics to create a domain gap against ``"base"``.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if variant not in ("base", "shifted"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = make_rng(seed, "synth", variant)
    protos = class_prototypes(n_classes, family_seed, label_seed)
    labels = np.arange(n) % n_classes
    labels = labels[rng.permutation(n)]

    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    theta = np.array([protos[c][0] for c in labels])
    freq = np.array([protos[c][1] for c in labels])
    phase = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(*amplitude, n)
    wave = _grating(xx, yy, theta, freq, phase)
    # A weaker grating at random orientation/frequency that carries no label.
    d_theta = rng.uniform(0, np.pi, n)
    d_freq = np.asarray(_FREQS)[rng.integers(0, len(_FREQS), n)]
    d_amp = rng.uniform(0, distractor, n)
    wave = amp[:, None, None] * wave + d_amp[:, None, None] * _grating(
        xx, yy, d_theta, d_freq, rng.uniform(0, 2 * np.pi, n))

    if variant == "base":
        gain = rng.uniform(0.6, 1.0, (n, channels))
        level = rng.uniform(0.4, 0.6, (n, channels))
        sigma = 1.0
    else:
        gain = rng.uniform(0.3, 0.7, (n, channels)) * np.linspace(1.3, 0.7, channels)
        level = rng.uniform(0.25, 0.45, (n, channels)) + np.linspace(0.0, 0.3, channels)
        sigma = 1.5
    images = level[:, :, None, None] + gain[:, :, None, None] * wave[:, None, :, :]
    images = images + rng.normal(0.0, noise * sigma, images.shape)
    images = np.clip(images, 0.0, 1.0)
    train_idx, test_idx = random_split(n, test_fraction, seed)
    return Dataset(np.ascontiguousarray(images), labels.astype(np.int64), train_idx, test_idx,
                   name or f"synth-{variant}-{family_seed}", n_classes)


def spectral_features(images: np.ndarray) -> np.ndarray:
    """Translation-invariant amplitude spectrum of the channel-mean image."""
    gray = images.mean(axis=1)
    gray = gray - gray.mean(axis=(1, 2), keepdims=True)
    return np.abs(np.fft.rfft2(gray)).reshape(images.shape[0], -1)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugPolicy:
    crop_scale: tuple = (0.6, 1.0)
    flip_p: float = 0.5
    noise_sigma: float = 0.05
    jitter: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not 0 <= self.flip_p <= 1:
            raise ValueError("flip_p must be a probability")
        if not 0 <= self.noise_sigma <= 0.05:
            raise ValueError("noise_sigma must be in [0, 0.05]")
        if not 0 <= self.jitter <= 0.1:
            raise ValueError("jitter must be in [0, 0.1]")


def augment(images: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop (resized back, nearest), flip, channel jitter and noise; clipped to [0, 1]."""
    b, c, h, w = images.shape
    out = np.empty_like(images)
    scales = rng.uniform(policy.crop_scale[0], policy.crop_scale[1], b)
    flips = rng.random(b) < policy.flip_p
    for i in range(b):
        ch = max(1, int(round(scales[i] * h)))
        cw = max(1, int(round(scales[i] * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        rows = top + (np.arange(h) * ch) // h
        cols = left + (np.arange(w) * cw) // w
        if flips[i]:
            cols = cols[::-1]
        out[i] = images[i][:, rows[:, None], cols[None, :]]
    gains = 1.0 + rng.uniform(-policy.jitter, policy.jitter, (b, c, 1, 1))
    out = out * gains
    if policy.noise_sigma:
        out = out + rng.normal(0.0, policy.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError("truncated IDX magic", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise ParseError("IDX magic must start with two zero bytes", 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"unknown IDX type code 0x{code:02x}", 2)
    if ndim == 0:
        raise ParseError("IDX ndim must be positive", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) < need:
        raise ParseError(f"IDX payload truncated: need {need} bytes, have {len(raw)}", len(raw))
    if len(raw) > need:
        raise ParseError("trailing bytes after IDX payload", need)
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    for code, dt in _IDX_TYPES.items():
        if np.dtype(dt).newbyteorder("=") == array.dtype.newbyteorder("="):
            break
    else:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(_IDX_TYPES[code]).tobytes())


def _quantized(images: np.ndarray) -> np.ndarray | None:
    k = np.round(images * 255.0)
    if np.array_equal(k / 255.0, images):
        return k.astype(np.uint8)
    return None


def _to_unit(arr: np.ndarray, offset: int) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    out = arr.astype(np.float64)
    if np.any(~np.isfinite(out)) or out.min(initial=0.0) < 0.0 or out.max(initial=0.0) > 1.0:
        raise ParseError("float pixel values must lie in [0, 1]", offset)
    return out


def load_idx(images_path, labels_path=None, *, n_classes: int | None = None,
             test_fraction: float = 0.2, split_seed: int = 0, name: str | None = None) -> Dataset:
    """MNIST-style IDX: N×H×W (one channel) or N×C×H×W images, optional label vector."""
    arr = read_idx(images_path)
    if arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise ParseError(f"image IDX must be 3-D or 4-D, got {arr.ndim}-D", 3)
    images = _to_unit(arr, 4)
    labels = None
    if labels_path is not None:
        lab = read_idx(labels_path)
        if lab.ndim != 1 or lab.shape[0] != images.shape[0]:
            raise ParseError("label IDX must be a vector with one entry per image", 3)
        labels = lab.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise ParseError("negative label", 8)
    k = n_classes or (int(labels.max()) + 1 if labels is not None and labels.size else 2)
    train_idx, test_idx = random_split(images.shape[0], test_fraction, split_seed)
    return Dataset(images, labels, train_idx, test_idx, name or Path(images_path).stem, max(k, 2))


def save_idx(dataset: Dataset, images_path, labels_path=None) -> None:
    q = _quantized(dataset.images)
    write_idx(images_path, q if q is not None else dataset.images.astype(">f8"))
    if labels_path is not None and dataset.labels is not None:
        write_idx(labels_path, dataset.labels.astype(np.uint8 if dataset.n_classes <= 256 else ">i4"))


# ---------------------------------------------------------------- CSV files

def load_csv(path, *, n_classes: int | None = None, test_fraction: float = 0.2,
             split_seed: int = 0, name: str | None = None) -> Dataset:
    """``label,p0,p1,...`` rows; pixels as integers 0..255 or floats in [0, 1].

    An optional ``# shape=C,H,W`` first line fixes the image shape; otherwise a
    single square channel is assumed. A header row starting with ``label`` is
    skipped.
    """
    raw = Path(path).read_bytes()
    shape = None
    labels, rows = [], []
    integer_pixels = True
    offset = 0
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        text = line.decode("utf-8", errors="replace").strip()
        if not text:
            continue
        if text.startswith("#"):
            if text[1:].strip().startswith("shape="):
                try:
                    shape = tuple(int(v) for v in text.split("=", 1)[1].split(","))
                except ValueError:
                    raise ParseError("bad shape comment", start) from None
            continue
        if text.lower().startswith("label"):
            continue
        fields = text.split(",")
        try:
            labels.append(int(fields[0]))
            if any(("." in f or "e" in f.lower()) for f in fields[1:]):
                integer_pixels = False
            rows.append([float(f) for f in fields[1:]])
        except ValueError:
            raise ParseError("non-numeric CSV field", start) from None
        if len(rows[-1]) != len(rows[0]):
            raise ParseError(f"row has {len(rows[-1])} pixels, expected {len(rows[0])}", start)
        if labels[-1] < 0:
            raise ParseError("negative label", start)
    if not rows:
        raise ParseError("no data rows", len(raw))
    pix = np.asarray(rows)
    npx = pix.shape[1]
    if shape is None:
        side = int(round(math.sqrt(npx)))
        if side * side != npx:
            raise ParseError(f"{npx} pixels is not a square image; add '# shape=C,H,W'", 0)
        shape = (1, side, side)
    if int(np.prod(shape)) != npx:
        raise ParseError(f"shape {shape} does not match {npx} pixels", 0)
    if integer_pixels:
        if pix.min() < 0 or pix.max() > 255:
            raise ParseError("integer pixel values must lie in 0..255", 0)
        images = pix / 255.0
    else:
        if pix.min() < 0 or pix.max() > 1:
            raise ParseError("float pixel values must lie in [0, 1]", 0)
        images = pix
    lab = np.asarray(labels, dtype=np.int64)
    k = n_classes or int(lab.max()) + 1
    train_idx, test_idx = random_split(len(lab), test_fraction, split_seed)
    return Dataset(images.reshape((-1,) + shape), lab, train_idx, test_idx,
                   name or Path(path).stem, max(k, 2))


def save_csv(dataset: Dataset, path) -> None:
    q = _quantized(dataset.images)
    c, h, w = dataset.shape
    labels = dataset.labels if dataset.labels is not None else np.zeros(len(dataset.images), int)
    lines = [f"# shape={c},{h},{w}"]
    flat = dataset.images.reshape(len(labels), -1)
    for i, lab in enumerate(labels):
        if q is not None:
            vals = ",".join(str(int(v)) for v in q.reshape(len(labels), -1)[i])
        else:
            vals = ",".join(repr(float(v)) for v in flat[i])
        lines.append(f"{int(lab)},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- manifest

def load_manifest(path) -> Dataset:
    """JSON manifest: ``{"format": "idx"|"csv", "images", "labels"?, "split_seed"?,
    "test_fraction"?, "n_classes"?, "name"?}``; paths relative to the manifest."""
    path = Path(path)
    spec = json.loads(path.read_text())
    base = path.parent
    kw = dict(n_classes=spec.get("n_classes"), test_fraction=spec.get("test_fraction", 0.2),
              split_seed=spec.get("split_seed", 0), name=spec.get("name"))
    fmt = spec.get("format")
    if fmt == "idx":
        labels = spec.get("labels")
        return load_idx(base / spec["images"], base / labels if labels else None, **kw)
    if fmt == "csv":
        return load_csv(base / spec["images"], **kw)
    raise ValueError(f"unknown dataset format {fmt!r}")
