"""Perceptual hashes and the distances used to decide whether two images match.

Every hash starts from a :class:`GrayImage` and performs its own canonical
box-filter downsample, so callers never need to pre-resize thumbnails.

Bit hashes (aHash, dHash, pHash) are 64 bits, ordered row-major over the 8x8
decision grid with bit 0 at the top-left. Serialized, they are 16 lowercase
hex characters with bit 0 as the most significant bit of the first byte.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
import scipy.fft
from PIL import Image

from risbench.errors import (
    AlgorithmMismatch,
    DimensionMismatch,
    InvalidDimension,
    InvalidImage,
)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
VISHASH_GRID = 16


class HashAlgorithm(str, Enum):
    AHASH = "ahash"
    DHASH = "dhash"
    PHASH = "phash"
    VISHASH = "vishash"

    @property
    def is_bit_hash(self) -> bool:
        return self is not HashAlgorithm.VISHASH


@dataclass(frozen=True)
class GrayImage:
    """Row-major luminance raster with values in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidImage(f"expected a non-empty 2-D raster, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 255.0:
            raise InvalidImage("pixel values must be finite and lie in [0, 255]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def from_sequence(cls, width: int, height: int, values) -> "GrayImage":
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height:
            raise InvalidImage(f"{values.size} values do not fill a {width}x{height} raster")
        return cls(values.reshape(height, width))


@dataclass(frozen=True)
class BitHash64:
    """A 64-bit perceptual hash. ``value`` holds bit 0 in its most significant bit."""

    value: int
    algorithm: HashAlgorithm

    def __post_init__(self) -> None:
        if not 0 <= self.value < (1 << 64):
            raise ValueError("hash value must fit in 64 unsigned bits")
        object.__setattr__(self, "algorithm", HashAlgorithm(self.algorithm))
        if not self.algorithm.is_bit_hash:
            raise AlgorithmMismatch(f"{self.algorithm.value} is not a bit hash")

    @classmethod
    def from_bits(cls, bits, algorithm: HashAlgorithm) -> "BitHash64":
        flat = np.asarray(bits, dtype=bool).ravel()
        if flat.size != 64:
            raise ValueError(f"expected 64 bits, got {flat.size}")
        value = int.from_bytes(np.packbits(flat).tobytes(), "big")
        return cls(value, algorithm)

    @classmethod
    def from_hex(cls, text: str, algorithm: HashAlgorithm) -> "BitHash64":
        if len(text) != 16:
            raise ValueError(f"expected 16 hex characters, got {len(text)}")
        return cls(int(text, 16), algorithm)

    @property
    def bits(self) -> tuple[bool, ...]:
        return tuple(bool((self.value >> (63 - i)) & 1) for i in range(64))

    def hex(self) -> str:
        return f"{self.value:016x}"

    def __str__(self) -> str:
        return self.hex()

    def __sub__(self, other: "BitHash64") -> int:
        return hamming(self, other)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Real-valued hash compared with :func:`normalized_l2`."""

    values: np.ndarray
    algorithm: HashAlgorithm = HashAlgorithm.VISHASH

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(vals)):
            raise InvalidImage("feature vector contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "algorithm", HashAlgorithm(self.algorithm))
        if self.algorithm.is_bit_hash:
            raise AlgorithmMismatch(f"{self.algorithm.value} is not a feature hash")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return self.algorithm == other.algorithm and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.algorithm, self.values.tobytes()))

    def __len__(self) -> int:
        return self.values.size

    def to_text(self) -> str:
        """Comma-separated decimals with 9 significant digits."""
        return ",".join(format(float(v), ".9g") for v in self.values)

    @classmethod
    def from_text(cls, text: str, algorithm: HashAlgorithm = HashAlgorithm.VISHASH) -> "FeatureVector":
        return cls(np.array([float(t) for t in text.split(",")]), algorithm)


Hash = Union[BitHash64, FeatureVector]


@dataclass(frozen=True)
class DistanceThreshold:
    phash_bits: int = 5
    vishash_distance: float = 0.3

    def __post_init__(self) -> None:
        if not 0 <= self.phash_bits <= 64:
            raise ValueError("phash_bits must be in [0, 64]")
        if not 0.0 <= self.vishash_distance <= 1.0:
            raise ValueError("vishash_distance must be in [0, 1]")


# -- raster preparation -------------------------------------------------------


def to_gray(image) -> GrayImage:
    """Convert an RGB(A) or gray array with channels in [0, 255] to luminance.

    Alpha is composited over white before the luma weights are applied.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidImage(f"cannot interpret array of shape {np.shape(image)} as an image")
    channels = arr.shape[2]
    if channels in (2, 4):
        alpha = arr[:, :, -1:] / 255.0
        arr = arr[:, :, :-1] * alpha + 255.0 * (1.0 - alpha)
        channels -= 1
    if channels == 1:
        gray = arr[:, :, 0]
    elif channels == 3:
        r, g, b = LUMA_WEIGHTS
        gray = r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]
    else:
        raise InvalidImage(f"unsupported channel count {channels}")
    return GrayImage(np.clip(gray, 0.0, 255.0))


def decode_image(data: bytes) -> GrayImage:
    """Decode encoded image bytes (any Pillow-readable format) to luminance."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            rgba = im.convert("RGBA")
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise InvalidImage(f"undecodable image: {exc}") from exc
    return to_gray(np.asarray(rgba))


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    # W[i, j] = overlap of source cell j with output cell i, normalised by the output cell's extent
    scale = n_in / n_out
    lo = np.arange(n_out)[:, None] * scale
    hi = lo + scale
    src = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, src + 1) - np.maximum(lo, src), 0.0, None)
    return overlap / scale


def _resize_axis0(x: np.ndarray, n_out: int) -> np.ndarray:
    n_in = x.shape[0]
    if n_in == n_out:
        return x
    weights = _box_weights(n_in, n_out)
    # Work on offsets from the first line so constant lines stay exactly constant,
    # and accumulate elementwise (not BLAS) so identical lines get identical results.
    ref = x[0]
    offsets = x - ref
    out = np.empty((n_out, x.shape[1]))
    for i in range(n_out):
        src = np.nonzero(weights[i])[0]
        out[i] = ref + (weights[i, src, None] * offsets[src]).sum(axis=0)
    return out


def resize_gray(img: GrayImage, w: int, h: int) -> GrayImage:
    """Box-filter (area-averaging) resize to exactly ``w`` x ``h``."""
    if w < 1 or h < 1:
        raise InvalidDimension(f"target size must be at least 1x1, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return img
    rows = _resize_axis0(img.pixels, h)
    out = _resize_axis0(np.ascontiguousarray(rows.T), w).T
    return GrayImage(np.clip(out, 0.0, 255.0))


# -- bit hashes ---------------------------------------------------------------


def ahash(img: GrayImage) -> BitHash64:
    px = resize_gray(img, 8, 8).pixels
    mean = math.fsum(px.ravel()) / px.size
    return BitHash64.from_bits(px > mean, HashAlgorithm.AHASH)


def dhash(img: GrayImage) -> BitHash64:
    px = resize_gray(img, 9, 8).pixels
    return BitHash64.from_bits(px[:, 1:] > px[:, :-1], HashAlgorithm.DHASH)


def dct2d(matrix) -> np.ndarray:
    """Orthonormal type-II 2-D DCT; ``out[0, 0]`` is the DC term."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise InvalidDimension(f"dct2d needs a non-empty square matrix, got shape {a.shape}")
    n = a.shape[0]
    # DCT is linear and maps a constant c to n*c at DC only; transforming the offset
    # from a reference value guarantees exact zeros in every AC term of constant input.
    ref = a[0, 0]
    out = scipy.fft.dctn(a - ref, type=2, norm="ortho")
    out[0, 0] += n * ref
    return out


def phash(img: GrayImage) -> BitHash64:
    coeffs = dct2d(resize_gray(img, 32, 32).pixels)[:8, :8]
    return BitHash64.from_bits(coeffs > np.median(coeffs), HashAlgorithm.PHASH)


# -- feature hash -------------------------------------------------------------


def vishash(img: GrayImage, grid: int = VISHASH_GRID) -> FeatureVector:
    """Horizontal and vertical neighbour differences on a ``grid`` x ``grid`` lattice.

    Returns ``2 * grid**2`` values in [-1, 1]: horizontal differences first, then
    vertical, each block row-major.
    """
    wide = resize_gray(img, grid + 1, grid).pixels
    tall = resize_gray(img, grid, grid + 1).pixels
    horizontal = wide[:, 1:] - wide[:, :-1]
    vertical = tall[1:, :] - tall[:-1, :]
    return FeatureVector(np.concatenate([horizontal.ravel(), vertical.ravel()]) / 255.0)


_HASHERS = {
    HashAlgorithm.AHASH: ahash,
    HashAlgorithm.DHASH: dhash,
    HashAlgorithm.PHASH: phash,
    HashAlgorithm.VISHASH: vishash,
}


def compute_hash(img: GrayImage, algorithm: HashAlgorithm | str) -> Hash:
    return _HASHERS[HashAlgorithm(algorithm)](img)


def hash_to_text(h: Hash) -> str:
    return h.hex() if isinstance(h, BitHash64) else h.to_text()


def hash_from_text(text: str, algorithm: HashAlgorithm | str) -> Hash:
    algorithm = HashAlgorithm(algorithm)
    if algorithm.is_bit_hash:
        return BitHash64.from_hex(text, algorithm)
    return FeatureVector.from_text(text, algorithm)


# -- distances ----------------------------------------------------------------


def hamming(a: BitHash64, b: BitHash64) -> int:
    if a.algorithm != b.algorithm:
        raise AlgorithmMismatch(f"cannot compare {a.algorithm.value} with {b.algorithm.value}")
    return (a.value ^ b.value).bit_count()


def _norm(v: np.ndarray) -> float:
    # power-of-two rescaling is exact and keeps tiny entries from underflowing when squared
    peak = float(np.max(np.abs(v), initial=0.0))
    if peak == 0.0:
        return 0.0
    scale = math.ldexp(1.0, math.frexp(peak)[1])
    return scale * float(np.linalg.norm(v / scale))


def normalized_l2(a: FeatureVector, b: FeatureVector) -> float:
    """``||a - b|| / (||a|| + ||b||)``, in [0, 1]; 0 when both vectors are zero."""
    if a.values.shape != b.values.shape:
        raise DimensionMismatch(f"dimension {a.values.size} != {b.values.size}")
    denom = _norm(a.values) + _norm(b.values)
    if denom == 0.0:
        return 0.0
    return min(_norm(a.values - b.values) / denom, 1.0)


def distance(a: Hash, b: Hash) -> int | float:
    if a.algorithm != b.algorithm:
        raise AlgorithmMismatch(f"cannot compare {a.algorithm.value} with {b.algorithm.value}")
    if isinstance(a, BitHash64):
        return hamming(a, b)
    return normalized_l2(a, b)


def within_threshold(
    algorithm: HashAlgorithm | str, dist: int | float, thresholds: DistanceThreshold
) -> bool:
    if HashAlgorithm(algorithm).is_bit_hash:
        return dist <= thresholds.phash_bits
    return dist <= thresholds.vishash_distance


def is_same(query_hash: Hash, candidate_hash: Hash, thresholds: DistanceThreshold = DistanceThreshold()) -> bool:
    return within_threshold(query_hash.algorithm, distance(query_hash, candidate_hash), thresholds)


__all__ = [
    "AlgorithmMismatch",
    "BitHash64",
    "DimensionMismatch",
    "DistanceThreshold",
    "FeatureVector",
    "GrayImage",
    "HashAlgorithm",
    "InvalidDimension",
    "InvalidImage",
    "ahash",
    "compute_hash",
    "dct2d",
    "decode_image",
    "dhash",
    "distance",
    "hamming",
    "hash_from_text",
    "hash_to_text",
    "is_same",
    "normalized_l2",
    "phash",
    "resize_gray",
    "to_gray",
    "vishash",
    "within_threshold",
]
