"""Flat parameter vectors with named block layouts, and adaptable-index masks.

Every model in the zoo exposes its weights as one contiguous float64 vector.
The layout records how that vector maps back onto named blocks such as
``encoder.cand_rec`` or ``decoder.weight``; block names use dotted prefixes so
a whole subnetwork can be selected with ``AdaptableMask.for_blocks``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigError


class Block(NamedTuple):
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class ParameterVector:
    """Immutable flat view of model parameters.

    ``values`` is float64 of length p; ``layout`` partitions [0, p) into
    contiguous named blocks in ascending offset order.
    """

    values: np.ndarray
    layout: tuple[Block, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(Block(*b) for b in self.layout))
        if values.ndim != 1:
            raise ConfigError("parameter values must be a flat vector")
        expected = 0
        for block in self.layout:
            if block.offset != expected:
                raise ConfigError(f"block {block.name!r} is not contiguous")
            if block.length < 0:
                raise ConfigError(f"block {block.name!r} has negative length")
            expected += block.length
        if expected != values.size:
            raise ConfigError(
                f"layout covers {expected} entries but vector has {values.size}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def block_slice(self, name: str) -> slice:
        for block in self.layout:
            if block.name == name:
                return slice(block.offset, block.offset + block.length)
        raise KeyError(name)

    def block(self, name: str) -> np.ndarray:
        return self.values[self.block_slice(name)]

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def block_names(self) -> tuple[str, ...]:
        return tuple(b.name for b in self.layout)


def unflatten(params: ParameterVector, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    """Split the flat vector into named arrays (views, no copies)."""
    out = {}
    for block in params.layout:
        shape = shapes[block.name]
        out[block.name] = params.values[block.offset:block.offset + block.length].reshape(shape)
    return out


def flatten(arrays: dict[str, np.ndarray], layout: Iterable[Block]) -> np.ndarray:
    """Inverse of :func:`unflatten`: concatenate named arrays in layout order."""
    return np.concatenate([np.asarray(arrays[b.name], dtype=np.float64).ravel() for b in layout])


@dataclass(frozen=True)
class AdaptableMask:
    """Sorted index set selecting the adaptable subset of a parameter vector."""

    indices: np.ndarray
    size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1 or idx.size == 0:
            raise ConfigError("mask must select at least one parameter")
        if np.any(np.diff(idx) <= 0):
            raise ConfigError("mask indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.size:
            raise ConfigError("mask indices out of bounds")

    def __len__(self) -> int:
        return int(self.indices.size)

    @classmethod
    def all_of(cls, params: ParameterVector) -> "AdaptableMask":
        return cls(np.arange(params.size), params.size)

    @classmethod
    def for_blocks(cls, params: ParameterVector, prefixes: Iterable[str]) -> "AdaptableMask":
        """Select every block whose name matches or starts with one of ``prefixes``.

        A prefix matches a block if it equals the block name or the name
        continues with a dot, so ``"encoder"`` selects ``encoder.reset_in``
        but not ``encoders.weight``.
        """
        prefixes = tuple(prefixes)
        picked = []
        for block in params.layout:
            if any(block.name == p or block.name.startswith(p + ".") for p in prefixes):
                picked.append(np.arange(block.offset, block.offset + block.length))
        if not picked:
            raise ConfigError(f"no parameter block matches prefixes {prefixes!r}")
        return cls(np.concatenate(picked), params.size)
