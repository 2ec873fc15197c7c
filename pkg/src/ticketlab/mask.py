"""Packed binary masks over the prunable-parameter layout."""
from __future__ import annotations

import numpy as np


class LayoutMismatch(ValueError):
    """A mask or checkpoint was applied to a different parameter layout."""


class Mask:
    """Immutable bit vector of length ``size`` bound to a layout id.

    Bits are packed MSB-first into uint8 (``numpy.packbits`` order). Padding
    bits in the final byte are always zero, so bytewise AND/OR/popcount are
    exact.
    """

    __slots__ = ("packed", "size", "layout_id")

    def __init__(self, packed: np.ndarray, size: int, layout_id: str):
        packed = np.array(packed, dtype=np.uint8, copy=True).ravel()
        if packed.size != (size + 7) // 8:
            raise ValueError(f"packed length {packed.size} does not cover {size} bits")
        tail = size % 8
        if tail and packed.size and packed[-1] & (0xFF >> tail):
            raise ValueError("padding bits must be zero")
        packed.setflags(write=False)
        self.packed = packed
        self.size = int(size)
        self.layout_id = str(layout_id)

    @classmethod
    def from_bool(cls, bits, layout_id: str) -> "Mask":
        bits = np.asarray(bits, dtype=bool).ravel()
        return cls(np.packbits(bits), bits.size, layout_id)

    @classmethod
    def ones(cls, size: int, layout_id: str) -> "Mask":
        return cls.from_bool(np.ones(size, dtype=bool), layout_id)

    @classmethod
    def zeros(cls, size: int, layout_id: str) -> "Mask":
        return cls.from_bool(np.zeros(size, dtype=bool), layout_id)

    def to_bool(self) -> np.ndarray:
        return np.unpackbits(self.packed, count=self.size).astype(bool)

    @property
    def popcount(self) -> int:
        return int(np.bitwise_count(self.packed).sum())

    @property
    def density(self) -> float:
        return self.popcount / self.size if self.size else 1.0

    @property
    def sparsity(self) -> float:
        return 1.0 - self.density

    def _tail_clear(self, packed: np.ndarray) -> np.ndarray:
        tail = self.size % 8
        if tail:
            packed[-1] &= (0xFF << (8 - tail)) & 0xFF
        return packed

    def _same(self, other: "Mask") -> None:
        if self.size != other.size or self.layout_id != other.layout_id:
            raise LayoutMismatch(
                f"mask layouts differ: {self.layout_id}/{self.size} vs {other.layout_id}/{other.size}")

    def __and__(self, other: "Mask") -> "Mask":
        self._same(other)
        return Mask(self.packed & other.packed, self.size, self.layout_id)

    def __or__(self, other: "Mask") -> "Mask":
        self._same(other)
        return Mask(self.packed | other.packed, self.size, self.layout_id)

    def __xor__(self, other: "Mask") -> "Mask":
        self._same(other)
        return Mask(self.packed ^ other.packed, self.size, self.layout_id)

    def __invert__(self) -> "Mask":
        return Mask(self._tail_clear(~self.packed), self.size, self.layout_id)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return (self.size == other.size and self.layout_id == other.layout_id
                and bool(np.array_equal(self.packed, other.packed)))

    def __hash__(self) -> int:
        return hash((self.size, self.layout_id, self.packed.tobytes()))

    def issubset(self, other: "Mask") -> bool:
        self._same(other)
        return not np.any(self.packed & ~other.packed)

    def check(self, layout_id: str, size: int) -> None:
        if self.layout_id != layout_id or self.size != size:
            raise LayoutMismatch(
                f"mask bound to {self.layout_id}/{self.size}, target is {layout_id}/{size}")

    def __repr__(self) -> str:
        return f"Mask(size={self.size}, popcount={self.popcount}, layout_id={self.layout_id!r})"
