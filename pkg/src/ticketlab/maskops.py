"""Mask algebra and analytics: complement, random and perturbed masks,
relative similarity and zero-kernel statistics with PGM heatmaps."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mask import Mask
from .network import Layout


def complement(m: Mask) -> Mask:
    return ~m


def random_mask(layout: Layout, sparsity: float, rng: np.random.Generator) -> Mask:
    """Exactly ``floor((1 - sparsity) * d1)`` survivors drawn without replacement."""
    if not 0 <= sparsity <= 1:
        raise ValueError("sparsity must be in [0, 1]")
    d1 = layout.size
    keep = int(math.floor((1.0 - sparsity) * d1 + 1e-9))
    bits = np.zeros(d1, dtype=bool)
    bits[rng.choice(d1, size=keep, replace=False)] = True
    return Mask.from_bool(bits, layout.layout_id)


def perturb(m: Mask, rho: float = 0.10, rng: np.random.Generator | None = None) -> Mask:
    """Flip ``floor(rho*ones)`` one-bits off and ``floor(rho*zeros)`` zero-bits on."""
    if not 0 <= rho < 1:
        raise ValueError("rho must be in [0, 1)")
    if rng is None:
        raise ValueError("perturb needs an rng")
    bits = m.to_bool()
    ones, zeros = np.flatnonzero(bits), np.flatnonzero(~bits)
    off = rng.choice(ones, size=int(math.floor(rho * ones.size)), replace=False)
    on = rng.choice(zeros, size=int(math.floor(rho * zeros.size)), replace=False)
    bits[off] = False
    bits[on] = True
    return Mask.from_bool(bits, m.layout_id)


def hamming(a: Mask, b: Mask) -> int:
    return (a ^ b).popcount


def relative_similarity(a: Mask, b: Mask) -> float:
    """``|a & b| / |a | b|``; two all-zero masks count as identical (1.0)."""
    union = (a | b).popcount
    if union == 0:
        return 1.0
    return (a & b).popcount / union


@dataclass(frozen=True)
class LayerKernels:
    name: str
    block: str
    grid: np.ndarray  # (out_ch, in_ch) bool, True where the whole k x k slice is off

    @property
    def count(self) -> int:
        return int(self.grid.sum())


@dataclass(frozen=True)
class KernelMap:
    layers: tuple

    @property
    def counts(self) -> dict:
        return {lk.name: lk.count for lk in self.layers}

    @property
    def total(self) -> int:
        return sum(lk.count for lk in self.layers)


def zero_kernels(mask: Mask, layout: Layout) -> KernelMap:
    """Per conv layer, mark each (out, in) spatial slice whose bits are all off."""
    mask.check(layout.layout_id, layout.size)
    parts = layout.split(mask.to_bool())
    layers = []
    for e in layout.entries:  # layout order runs input -> output
        if len(e.shape) != 4:
            continue
        grid = ~parts[e.name].reshape(e.shape[0], e.shape[1], -1).any(axis=2)
        layers.append(LayerKernels(e.name, e.block, grid))
    return KernelMap(tuple(layers))


def _layer_file(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def heatmap_export(kmap: KernelMap, path) -> list[Path]:
    """One P5 graymap per layer (255 = zero kernel, 0 = alive) plus ``counts.csv``.

    Rows of each image are output channels, columns input channels. Nothing
    is written for an empty map.
    """
    if not kmap.layers:
        return []
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, lk in enumerate(kmap.layers):
        h, w = lk.grid.shape
        p = out / f"{i:02d}_{_layer_file(lk.name)}.pgm"
        p.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii")
                      + np.where(lk.grid, 255, 0).astype(np.uint8).tobytes())
        written.append(p)
    csv_path = out / "counts.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["layer", "block", "out_ch", "in_ch_total", "zero_kernels"])
        for lk in kmap.layers:
            for o in range(lk.grid.shape[0]):
                wr.writerow([lk.name, lk.block, o, lk.grid.shape[1], int(lk.grid[o].sum())])
    written.append(csv_path)
    return written


def read_pgm(path) -> np.ndarray:
    """Decode an 8-bit binary PGM (P5) into a 2-D uint8 array."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PGM header in {path}")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    body = data[pos + 1:]
    if len(body) != w * h:
        raise ValueError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)

