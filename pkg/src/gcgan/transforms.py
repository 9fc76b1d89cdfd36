"""Exact geometric transforms on channels-first images.

Every transform here is a permutation of pixel indices over the last two
axes, so it works unchanged on a single ``(C, H, W)`` image or a
``(B, C, H, W)`` batch, for both numpy arrays and torch tensors.

The set is the dihedral group of the square. Each element is stored as a
pair ``(k, s)`` meaning "vertical flip ``s`` times, then rotate clockwise
``k`` quarter turns".
"""

from __future__ import annotations

import enum
from typing import Sequence, Union

import numpy as np
import torch

Array = Union[np.ndarray, torch.Tensor]


class ShapeError(ValueError):
    """Raised when an array does not have the shape an operation needs."""


class GeoTransform(enum.Enum):
    IDENTITY = "identity"
    VFLIP = "vflip"
    ROT90CW = "rot90cw"
    ROT180 = "rot180"
    ROT270CW = "rot270cw"
    HFLIP = "hflip"
    TRANSPOSE = "transpose"
    ANTITRANSPOSE = "antitranspose"

    @property
    def rotation(self) -> int:
        return _CODES[self][0]

    @property
    def flipped(self) -> bool:
        return bool(_CODES[self][1])

    @property
    def swaps_axes(self) -> bool:
        """True when the output has height and width exchanged."""
        return self.rotation % 2 == 1

    @classmethod
    def parse(cls, name: Union[str, "GeoTransform"]) -> "GeoTransform":
        if isinstance(name, GeoTransform):
            return name
        key = name.strip().lower()
        key = ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            known = sorted({t.value for t in cls} | set(ALIASES))
            raise ValueError(f"unknown transform {name!r}; expected one of {known}") from None


_CODES = {
    GeoTransform.IDENTITY: (0, 0),
    GeoTransform.ROT90CW: (1, 0),
    GeoTransform.ROT180: (2, 0),
    GeoTransform.ROT270CW: (3, 0),
    GeoTransform.VFLIP: (0, 1),
    GeoTransform.TRANSPOSE: (1, 1),
    GeoTransform.HFLIP: (2, 1),
    GeoTransform.ANTITRANSPOSE: (3, 1),
}
_FROM_CODE = {code: t for t, code in _CODES.items()}

# short names used on the command line and in config files
ALIASES = {
    "id": "identity",
    "rot": "rot90cw",
    "rot90": "rot90cw",
    "rot270": "rot270cw",
    "vf": "vflip",
    "hf": "hflip",
}


def _vflip(x: Array) -> Array:
    if isinstance(x, torch.Tensor):
        return torch.flip(x, dims=(-2,))
    return np.flip(x, axis=-2)


def _rot90cw(x: Array, k: int) -> Array:
    # out[..., i, j] = in[..., H-1-j, i]
    if k == 0:
        return x
    if isinstance(x, torch.Tensor):
        return torch.rot90(x, k=-k, dims=(-2, -1))
    return np.rot90(x, k=-k, axes=(-2, -1))


def apply_transform(t: GeoTransform, x: Array, strict_square: bool = False) -> Array:
    """Apply ``t`` to the last two (spatial) axes of ``x``.

    The input is never mutated. Numpy results are returned as contiguous
    copies so callers can write into them freely.
    """
    if x.ndim < 2:
        raise ShapeError(f"expected at least 2 spatial dims, got shape {tuple(x.shape)}")
    t = GeoTransform.parse(t)
    h, w = x.shape[-2], x.shape[-1]
    if strict_square and t.swaps_axes and h != w:
        raise ShapeError(f"{t.value} needs a square image in strict mode, got {h}x{w}")
    k, s = _CODES[t]
    out = _vflip(x) if s else x
    out = _rot90cw(out, k)
    if isinstance(out, np.ndarray):
        return x.copy() if out is x else np.ascontiguousarray(out)
    if out is x:
        return x.clone()
    return out.contiguous()


def invert_transform(t: GeoTransform) -> GeoTransform:
    t = GeoTransform.parse(t)
    k, s = _CODES[t]
    if s:
        return t  # reflections are involutions
    return _FROM_CODE[((-k) % 4, 0)]


def compose(t1: GeoTransform, t2: GeoTransform) -> GeoTransform:
    """Return the transform equal to applying ``t2`` first, then ``t1``."""
    k1, s1 = _CODES[GeoTransform.parse(t1)]
    k2, s2 = _CODES[GeoTransform.parse(t2)]
    # a flip conjugates a rotation into its inverse: V R^k = R^-k V
    k = (k1 + (-k2 if s1 else k2)) % 4
    return _FROM_CODE[(k, s1 ^ s2)]


def sample_transform(pool: Sequence[GeoTransform], rng: Union[int, np.random.Generator]) -> GeoTransform:
    """Draw one element of ``pool`` uniformly.

    ``rng`` is either an integer seed or a numpy ``Generator`` whose state
    is advanced by the draw.
    """
    if len(pool) == 0:
        raise ValueError("transform pool is empty")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return GeoTransform.parse(pool[int(rng.integers(len(pool)))])


def parse_pool(spec: Union[str, Sequence[str]]) -> tuple:
    """Parse ``"rot,vf"`` (or a list of names) into a tuple of transforms.

    ``"mix"`` expands to the rotation and vertical-flip pair.
    """
    if isinstance(spec, str):
        names = [n for n in spec.replace(" ", "").split(",") if n]
    else:
        names = list(spec)
    out = []
    for name in names:
        if isinstance(name, str) and name.lower() == "mix":
            out.extend([GeoTransform.ROT90CW, GeoTransform.VFLIP])
        else:
            out.append(GeoTransform.parse(name))
    return tuple(dict.fromkeys(out))
