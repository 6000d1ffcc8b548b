"""Grayscale images, binary PGM I/O and the classical perturbation suite.

Intensities live in [0, 1] as float64. Every perturbation clamps its output to
that range; quantisation to bytes happens only in :func:`encode_pgm`.

Array-level helpers (``gamma_array`` and friends) accept a single (h, w)
image or a (n, h, w) stack and are what the harness uses on whole test sets.
"""

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cfstress import _kernels
from cfstress.errors import DataError

KINDS = ("GC", "CC", "BC", "SC", "GB")

DEFAULTS = {
    "GC": {"gamma": 1.7},
    "CC": {"contrast_factor": 1.7},
    "BC": {"brightness_factor": 1.5},
    "SC": {"sharpness_factor": 2.5},
    "GB": {"kernel_size": 7, "sigma": 1.5},
}


@dataclass(frozen=True, eq=False)
class ImageGray:
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 1:
            if arr.size != self.width * self.height:
                raise DataError(
                    f"data length {arr.size} != {self.width}x{self.height}")
            arr = arr.reshape(self.height, self.width)
        if arr.shape != (self.height, self.width):
            raise DataError(f"data shape {arr.shape} != ({self.height}, {self.width})")
        if self.width < 1 or self.height < 1:
            raise DataError("image must be at least 1x1")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("intensities must be finite and within [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        return cls(width=arr.shape[1], height=arr.shape[0], data=arr)

    @property
    def shape(self):
        return (self.height, self.width)

    def __eq__(self, other):
        if not isinstance(other, ImageGray):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


# ---------------------------------------------------------------------------
# PGM

_HEADER_TOKEN = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")


def decode_pgm(blob):
    """Decode a binary P5 PGM with maxval 255."""
    blob = bytes(blob)
    tokens = []
    pos = 0
    for _ in range(4):
        m = _HEADER_TOKEN.match(blob, pos)
        if m is None:
            raise DataError("truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise DataError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"malformed PGM header: {exc}") from None
    if maxval != 255:
        raise DataError(f"unsupported PGM maxval {maxval}; expected 255")
    if width < 1 or height < 1:
        raise DataError("PGM dimensions must be positive")
    if pos >= len(blob) or blob[pos:pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise DataError("missing whitespace after PGM header")
    pos += 1
    count = width * height
    payload = blob[pos:pos + count]
    if len(payload) < count:
        raise DataError(
            f"truncated PGM payload: header claims {count} pixels, got {len(payload)} bytes")
    values = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return ImageGray(width=width, height=height, data=values.reshape(height, width))


def quantize(data):
    """Map intensities to bytes with round-half-away-from-zero."""
    scaled = np.asarray(data, dtype=np.float64) * 255.0
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, 0, 255).astype(np.uint8)


def encode_pgm(img):
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + quantize(img.data).tobytes()


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, img):
    Path(path).write_bytes(encode_pgm(img))


# ---------------------------------------------------------------------------
# array-level perturbations


def _clamp(a):
    return np.clip(a, 0.0, 1.0)


def gamma_array(a, gamma):
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return _clamp(np.power(a, gamma))


def contrast_array(a, factor, pivot="mean"):
    if not factor >= 0:
        raise ValueError(f"contrast factor must be >= 0, got {factor}")
    a = np.asarray(a, dtype=np.float64)
    if pivot == "mean":
        mu = a.mean(axis=(-2, -1), keepdims=True)
    elif pivot == "half":
        mu = 0.5
    else:
        raise ValueError(f"unknown contrast pivot {pivot!r}")
    # (1-f)*mu + f*t keeps f == 1 bit-exact
    return _clamp((1.0 - factor) * mu + factor * a)


def brightness_array(a, factor):
    if not factor >= 0:
        raise ValueError(f"brightness factor must be >= 0, got {factor}")
    return _clamp(factor * np.asarray(a, dtype=np.float64))


def sharpness_array(a, factor):
    if not factor >= 0:
        raise ValueError(f"sharpness factor must be >= 0, got {factor}")
    a = np.asarray(a, dtype=np.float64)
    smooth = _kernels.smooth3x3_interior(a)
    return _clamp((1.0 - factor) * smooth + factor * a)


def gaussian_kernel(kernel_size, sigma):
    """Normalised 1-D Gaussian weights over offsets -(k-1)/2 .. (k-1)/2."""
    if kernel_size < 1 or kernel_size % 2 != 1 or int(kernel_size) != kernel_size:
        raise ValueError(f"kernel_size must be an odd integer >= 1, got {kernel_size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    half = (int(kernel_size) - 1) // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-offsets ** 2 / (2.0 * sigma * sigma))
    return w / w.sum()


def blur_array(a, kernel_size, sigma):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ValueError("image must be at least 1x1")
    w = gaussian_kernel(kernel_size, sigma)
    horiz = _kernels.convolve_rows(a, w)
    vert = _kernels.convolve_rows(np.swapaxes(horiz, -1, -2), w)
    return _clamp(np.ascontiguousarray(np.swapaxes(vert, -1, -2)))


# ---------------------------------------------------------------------------
# ImageGray-level API


def _wrap(img, arr):
    return ImageGray(width=img.width, height=img.height, data=arr)


def apply_gamma(img, gamma):
    return _wrap(img, gamma_array(img.data, gamma))


def apply_contrast(img, factor, pivot="mean"):
    return _wrap(img, contrast_array(img.data, factor, pivot))


def apply_brightness(img, factor):
    return _wrap(img, brightness_array(img.data, factor))


def apply_sharpness(img, factor):
    return _wrap(img, sharpness_array(img.data, factor))


def apply_gaussian_blur(img, kernel_size, sigma):
    return _wrap(img, blur_array(img.data, kernel_size, sigma))


@dataclass(frozen=True)
class PerturbationSpec:
    """One classical stress-test transform; unset parameters take defaults."""

    kind: str
    gamma: float = None
    contrast_factor: float = None
    brightness_factor: float = None
    sharpness_factor: float = None
    kernel_size: int = None
    sigma: float = None
    contrast_pivot: str = "mean"
    name: str = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}; expected one of {KINDS}")
        for key, value in DEFAULTS[self.kind].items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.name is None:
            object.__setattr__(self, "name", self.kind)
        self.validate()

    def validate(self):
        k = self.kind
        if k == "GC" and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if k == "CC" and not self.contrast_factor >= 0:
            raise ValueError("contrast_factor must be >= 0")
        if k == "BC" and not self.brightness_factor >= 0:
            raise ValueError("brightness_factor must be >= 0")
        if k == "SC" and not self.sharpness_factor >= 0:
            raise ValueError("sharpness_factor must be >= 0")
        if k == "GB":
            if self.kernel_size < 1 or self.kernel_size % 2 != 1:
                raise ValueError("kernel_size must be odd and >= 1")
            if not self.sigma > 0:
                raise ValueError("sigma must be > 0")
        if self.contrast_pivot not in ("mean", "half"):
            raise ValueError(f"unknown contrast pivot {self.contrast_pivot!r}")

    def params(self):
        keys = DEFAULTS[self.kind].keys()
        out = {k: getattr(self, k) for k in keys}
        if self.kind == "CC":
            out["contrast_pivot"] = self.contrast_pivot
        return out


def perturb_array(a, spec):
    """Apply ``spec`` to an (h, w) array or an (n, h, w) stack."""
    if spec.kind == "GC":
        return gamma_array(a, spec.gamma)
    if spec.kind == "CC":
        return contrast_array(a, spec.contrast_factor, spec.contrast_pivot)
    if spec.kind == "BC":
        return brightness_array(a, spec.brightness_factor)
    if spec.kind == "SC":
        return sharpness_array(a, spec.sharpness_factor)
    return blur_array(a, spec.kernel_size, spec.sigma)


def apply_perturbation(img, spec):
    return _wrap(img, perturb_array(img.data, spec))


def default_suite():
    return [PerturbationSpec(kind) for kind in KINDS]

