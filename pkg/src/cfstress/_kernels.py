"""Hot inner loops, compiled with numba when available.

Every kernel has two implementations with identical signatures: a loop version
compiled with ``numba.njit`` and a vectorised numpy version. Set
``CFSTRESS_DISABLE_NUMBA=1`` to force the numpy path (also used automatically
when numba cannot be imported). Both paths agree to rounding; tests run both.
"""

import os
from types import SimpleNamespace

import numpy as np

_TRUTHY = {"1", "true", "yes", "on"}
DISABLED_BY_ENV = os.environ.get("CFSTRESS_DISABLE_NUMBA", "").strip().lower() in _TRUTHY

try:
    from numba import njit
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    NUMBA_AVAILABLE = False

BACKEND = "numba" if (NUMBA_AVAILABLE and not DISABLED_BY_ENV) else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations


def reflect101_indices(n, radius):
    """Index table of shape (n, 2*radius+1) for reflect-101 borders."""
    offsets = np.arange(-radius, radius + 1)
    idx = np.arange(n)[:, None] + offsets[None, :]
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _convolve_rows_np(stack, weights):
    n = stack.shape[-1]
    radius = (len(weights) - 1) // 2
    idx = reflect101_indices(n, radius)
    return stack[..., idx] @ weights


def _smooth3x3_np(stack):
    out = stack.copy()
    h, w = stack.shape[-2:]
    if h < 3 or w < 3:
        return out
    acc = np.zeros(stack.shape[:-2] + (h - 2, w - 2))
    for dy in range(3):
        for dx in range(3):
            acc += stack[..., dy:dy + h - 2, dx:dx + w - 2]
    # centre carries weight 5: 1 already counted, add 4 more
    acc += 4.0 * stack[..., 1:h - 1, 1:w - 1]
    out[..., 1:h - 1, 1:w - 1] = acc / 13.0
    return out


def _pair_counts_np(x, y):
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    upper = np.triu(np.ones(sx.shape, dtype=bool), k=1)
    prod = (sx * sy)[upper]
    concordant = int(np.count_nonzero(prod > 0))
    discordant = int(np.count_nonzero(prod < 0))
    tied_x = int(np.count_nonzero(sx[upper] == 0))
    tied_y = int(np.count_nonzero(sy[upper] == 0))
    return concordant, discordant, tied_x, tied_y


# ---------------------------------------------------------------------------
# loop implementations (numba targets)


def _reflect(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    if i >= n:
        i = period - i
    return i


def _convolve_rows_loop(stack, weights):
    m, h, w = stack.shape
    k = weights.shape[0]
    radius = (k - 1) // 2
    out = np.empty((m, h, w))
    for b in range(m):
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for t in range(k):
                    acc += stack[b, r, _reflect(c + t - radius, w)] * weights[t]
                out[b, r, c] = acc
    return out


def _smooth3x3_loop(stack):
    m, h, w = stack.shape
    out = stack.copy()
    if h < 3 or w < 3:
        return out
    for b in range(m):
        for r in range(1, h - 1):
            for c in range(1, w - 1):
                acc = 0.0
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        acc += stack[b, r + dy, c + dx]
                acc += 4.0 * stack[b, r, c]
                out[b, r, c] = acc / 13.0
    return out


def _pair_counts_loop(x, y):
    n = x.shape[0]
    concordant = 0
    discordant = 0
    tied_x = 0
    tied_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0:
                tied_x += 1
            if dy == 0:
                tied_y += 1
            if dx != 0 and dy != 0:
                if (dx > 0) == (dy > 0):
                    concordant += 1
                else:
                    discordant += 1
    return concordant, discordant, tied_x, tied_y


if NUMBA_AVAILABLE:
    _reflect_nb = njit(_reflect)
    # the loop kernels call _reflect by global name; rebind for numba
    _reflect = _reflect_nb
    _convolve_rows_nb = njit(_convolve_rows_loop)
    _smooth3x3_nb = njit(_smooth3x3_loop)
    _pair_counts_nb = njit(_pair_counts_loop)
else:  # pragma: no cover
    _convolve_rows_nb = _convolve_rows_loop
    _smooth3x3_nb = _smooth3x3_loop
    _pair_counts_nb = _pair_counts_loop


def _as_stack(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a.reshape((-1,) + a.shape[-2:]), a.shape


def _wrap_stack(fn):
    def call(stack, *args):
        flat, shape = _as_stack(stack)
        return fn(flat, *args).reshape(shape)
    return call


def _wrap_pairs(fn):
    def call(x, y):
        c, d, tx, ty = fn(np.ascontiguousarray(x, dtype=np.float64),
                          np.ascontiguousarray(y, dtype=np.float64))
        return int(c), int(d), int(tx), int(ty)
    return call


numpy_impl = SimpleNamespace(
    convolve_rows=lambda stack, weights: _convolve_rows_np(
        np.asarray(stack, dtype=np.float64), np.asarray(weights, dtype=np.float64)),
    smooth3x3_interior=lambda stack: _smooth3x3_np(np.asarray(stack, dtype=np.float64)),
    pair_counts=_wrap_pairs(_pair_counts_np),
)

numba_impl = SimpleNamespace(
    convolve_rows=lambda stack, weights: _wrap_stack(_convolve_rows_nb)(
        stack, np.ascontiguousarray(weights, dtype=np.float64)),
    smooth3x3_interior=_wrap_stack(_smooth3x3_nb),
    pair_counts=_wrap_pairs(_pair_counts_nb),
)

_active = numba_impl if BACKEND == "numba" else numpy_impl


def convolve_rows(stack, weights):
    """Convolve along the last axis with reflect-101 borders.

    ``stack`` may be a single (h, w) image or any (..., h, w) batch.
    """
    return _active.convolve_rows(stack, weights)


def smooth3x3_interior(stack):
    """Apply [[1,1,1],[1,5,1],[1,1,1]]/13 to interior pixels, copy the border."""
    return _active.smooth3x3_interior(stack)


def pair_counts(x, y):
    """Return (concordant, discordant, pairs tied in x, pairs tied in y)."""
    return _active.pair_counts(x, y)
