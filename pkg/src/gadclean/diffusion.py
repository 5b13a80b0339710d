"""Perona-Malik and guided anisotropic diffusion on 4-neighbour grids.

The update for every pixel ``p`` and channel is the explicit flux form

    out(p) = in(p) + step * sum_{q in N4(p)} c(p, q) * (in(q) - in(p))

with one coefficient per undirected edge, so ``c(p, q) == c(q, p)`` and mass
is conserved. Edges leaving the image carry no flux (Neumann boundary).

Guided diffusion computes the coefficients of the filtered map from one or
two guide images instead of from the map itself. Per edge, a guide with
``C`` channels contributes

    c = 1 / (1 + (sum_C |guide_C(q) - guide_C(p)| / (C * K))**2)

and several guides are combined by taking the per-edge minimum. By default
each guide is itself diffused one step per iteration with its own
coefficients before the target is updated.

``K`` is expressed in the units of the guide samples; the package default
``K = 5`` assumes 8-bit grey levels (0-255).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .image import RasterError, RasterF, as_raster

MAX_STABLE_STEP = 0.25

# channel order of EdgeCoefficients.data
NORTH, SOUTH, EAST, WEST = range(4)


@dataclass(frozen=True)
class GadParams:
    """Iteration count, contrast sensitivity ``kappa`` (K) and time ``step`` (lambda)."""

    iterations: int = 100
    kappa: float = 5.0
    step: float = 0.24
    freeze_guides: bool = False

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations!r}")
        object.__setattr__(self, "iterations", int(self.iterations))
        if not (np.isfinite(self.kappa) and self.kappa > 0):
            raise ValueError(f"kappa must be positive, got {self.kappa!r}")
        check_step(self.step)


def check_step(step: float) -> None:
    if not np.isfinite(step) or step <= 0:
        raise ValueError(f"step (lambda) must be positive, got {step!r}")
    if step > MAX_STABLE_STEP:
        raise ValueError(
            f"step (lambda) = {step} exceeds the stability bound {MAX_STABLE_STEP} "
            "of explicit 4-neighbour diffusion (lambda must be <= 0.25)"
        )


def stopping_function(gradient_magnitude, kappa: float):
    """Edge-stopping function ``1 / (1 + (g / K)**2)``; scalar or array."""
    g = np.asarray(gradient_magnitude, dtype=np.float64)
    t = g / kappa
    out = 1.0 / (1.0 + t * t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class EdgeCoefficients:
    """Per-pixel coefficients towards the north, south, east and west neighbours.

    ``data`` has shape ``(height, width, 4)``. Entries for edges that would
    cross the border are 0. Build instances with :meth:`from_edges` to keep
    the two views of each undirected edge consistent.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 4:
            raise RasterError(f"edge coefficients need shape (H, W, 4), got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise RasterError("edge coefficients must lie in [0, 1]")
        if (
            arr[0, :, NORTH].any() or arr[-1, :, SOUTH].any()
            or arr[:, -1, EAST].any() or arr[:, 0, WEST].any()
        ):
            raise RasterError("coefficients on border-crossing edges must be 0")
        if not (
            np.array_equal(arr[1:, :, NORTH], arr[:-1, :, SOUTH])
            and np.array_equal(arr[:, 1:, WEST], arr[:, :-1, EAST])
        ):
            raise RasterError("edge coefficients are not symmetric")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_edges(cls, east: np.ndarray, south: np.ndarray) -> "EdgeCoefficients":
        """From ``east`` of shape ``(H, W-1)`` and ``south`` of shape ``(H-1, W)``."""
        east = np.asarray(east, dtype=np.float64)
        south = np.asarray(south, dtype=np.float64)
        h, w = east.shape[0], east.shape[1] + 1
        if south.shape != (h - 1, w):
            raise RasterError(f"edge arrays disagree: east {east.shape}, south {south.shape}")
        data = np.zeros((h, w, 4))
        data[:-1, :, SOUTH] = south
        data[1:, :, NORTH] = south
        data[:, :-1, EAST] = east
        data[:, 1:, WEST] = east
        return cls(data)

    @classmethod
    def ones(cls, height: int, width: int) -> "EdgeCoefficients":
        return cls.from_edges(np.ones((height, width - 1)), np.ones((height - 1, width)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def east(self) -> np.ndarray:
        return self.data[:, :-1, EAST]

    @property
    def south(self) -> np.ndarray:
        return self.data[:-1, :, SOUTH]

    def as_raster(self) -> RasterF:
        return RasterF(self.data)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


# Kernels work on planar (channels, height, width) arrays so the inner x loops
# are contiguous. ce[y, x] couples (y, x)-(y, x+1); cs[y, x] couples (y, x)-(y+1, x).


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _coeff_row_east(g, y, d2, ce):
    # 1 / (1 + (s / D)**2) evaluated as D**2 / (D**2 + s**2)
    nc, _, w = g.shape
    out = ce[y]
    if nc == 1:
        p = g[0, y]
        for x in range(w - 1):
            s = abs(p[x + 1] - p[x])
            out[x] = d2 / (d2 + s * s)
    elif nc == 3:
        r, gg, b = g[0, y], g[1, y], g[2, y]
        for x in range(w - 1):
            s = abs(r[x + 1] - r[x]) + abs(gg[x + 1] - gg[x]) + abs(b[x + 1] - b[x])
            out[x] = d2 / (d2 + s * s)
    else:
        for x in range(w - 1):
            s = 0.0
            for k in range(nc):
                s += abs(g[k, y, x + 1] - g[k, y, x])
            out[x] = d2 / (d2 + s * s)


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _coeff_row_south(g, y, d2, cs):
    nc, _, w = g.shape
    out = cs[y]
    if nc == 1:
        p, q = g[0, y], g[0, y + 1]
        for x in range(w):
            s = abs(q[x] - p[x])
            out[x] = d2 / (d2 + s * s)
    elif nc == 3:
        r0, r1 = g[0, y], g[0, y + 1]
        g0, g1 = g[1, y], g[1, y + 1]
        b0, b1 = g[2, y], g[2, y + 1]
        for x in range(w):
            s = abs(r1[x] - r0[x]) + abs(g1[x] - g0[x]) + abs(b1[x] - b0[x])
            out[x] = d2 / (d2 + s * s)
    else:
        for x in range(w):
            s = 0.0
            for k in range(nc):
                s += abs(g[k, y + 1, x] - g[k, y, x])
            out[x] = d2 / (d2 + s * s)


@njit(cache=True, nogil=True, error_model="numpy")
def _edge_coeffs(g, divisor, ce, cs):
    _, h, _ = g.shape
    d2 = divisor * divisor
    for y in range(h):
        _coeff_row_east(g, y, d2, ce)
    for y in range(h - 1):
        _coeff_row_south(g, y, d2, cs)


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _update_border_pixel(src, ce, cs, lam, dst, y, x):
    h, w = src.shape
    v = src[y, x]
    acc = 0.0
    if y > 0:
        acc += cs[y - 1, x] * (src[y - 1, x] - v)
    if y < h - 1:
        acc += cs[y, x] * (src[y + 1, x] - v)
    if x < w - 1:
        acc += ce[y, x] * (src[y, x + 1] - v)
    if x > 0:
        acc += ce[y, x - 1] * (src[y, x - 1] - v)
    dst[y, x] = v + lam * acc


@njit(cache=True, nogil=True, error_model="numpy", inline="always")
def _step_row(src, ce, cs, lam, dst, y):
    # neighbour order is north, south, east, west on every path
    nc, h, w = src.shape
    interior_row = 0 < y < h - 1
    for k in range(nc):
        sk, dk = src[k], dst[k]
        if not interior_row:
            for x in range(w):
                _update_border_pixel(sk, ce, cs, lam, dk, y, x)
            continue
        _update_border_pixel(sk, ce, cs, lam, dk, y, 0)
        if w > 1:
            _update_border_pixel(sk, ce, cs, lam, dk, y, w - 1)
        up, row, down = sk[y - 1], sk[y], sk[y + 1]
        c_n, c_s, c_e = cs[y - 1], cs[y], ce[y]
        out = dk[y]
        for x in range(1, w - 1):
            v = row[x]
            acc = c_n[x] * (up[x] - v)
            acc += c_s[x] * (down[x] - v)
            acc += c_e[x] * (row[x + 1] - v)
            acc += c_e[x - 1] * (row[x - 1] - v)
            out[x] = v + lam * acc


@njit(cache=True, nogil=True, error_model="numpy")
def _step(src, ce, cs, lam, dst):
    # rows outer, channels inner: one coefficient row serves all channels from cache
    for y in range(src.shape[1]):
        _step_row(src, ce, cs, lam, dst, y)


@njit(cache=True, nogil=True, error_model="numpy")
def _step_recompute(src, ce, cs, lam, dst, divisor):
    """Step ``src`` into ``dst``, then overwrite (ce, cs) with coefficients of ``dst``.

    Old ce[y] is last read by row y and old cs[y-1] by row y, so both can be
    replaced as soon as row y is written.
    """
    h = src.shape[1]
    d2 = divisor * divisor
    for y in range(h):
        _step_row(src, ce, cs, lam, dst, y)
        _coeff_row_east(dst, y, d2, ce)
        if y > 0:
            _coeff_row_south(dst, y - 1, d2, cs)


@njit(cache=True, nogil=True, error_model="numpy")
def _min_into(a, b, out):
    h, w = a.shape
    for y in range(h):
        for x in range(w):
            out[y, x] = min(a[y, x], b[y, x])


@njit(cache=True, nogil=True, error_model="numpy")
def _perona_malik_loop(img, divisor, lam, n_iter):
    _, h, w = img.shape
    cur = img.copy()
    nxt = np.empty_like(cur)
    ce = np.empty((h, w - 1))
    cs = np.empty((h - 1, w))
    _edge_coeffs(cur, divisor, ce, cs)
    for _ in range(n_iter):
        _step_recompute(cur, ce, cs, lam, nxt, divisor)
        cur, nxt = nxt, cur
    return cur


@njit(cache=True, nogil=True, error_model="numpy")
def _gad_loop(g1, div1, g2, div2, n_guides, target, lam, n_iter, freeze):
    _, h, w = target.shape
    a1 = g1.copy()
    b1 = np.empty_like(a1)
    a2 = g2.copy()
    b2 = np.empty_like(a2)
    cur = target.copy()
    nxt = np.empty_like(cur)
    ce1 = np.empty((h, w - 1))
    cs1 = np.empty((h - 1, w))
    ce2 = np.empty((h, w - 1))
    cs2 = np.empty((h - 1, w))
    ce = np.empty((h, w - 1))
    cs = np.empty((h - 1, w))

    # (ce_j, cs_j) always hold the coefficients of the current state of guide j
    _edge_coeffs(a1, div1, ce1, cs1)
    if n_guides == 2:
        _edge_coeffs(a2, div2, ce2, cs2)
    for it in range(n_iter):
        if not freeze:
            _step_recompute(a1, ce1, cs1, lam, b1, div1)
            a1, b1 = b1, a1
            if n_guides == 2:
                _step_recompute(a2, ce2, cs2, lam, b2, div2)
                a2, b2 = b2, a2
        if n_guides == 2:
            if it == 0 or not freeze:
                _min_into(ce1, ce2, ce)
                _min_into(cs1, cs2, cs)
            _step(cur, ce, cs, lam, nxt)
        else:
            _step(cur, ce1, cs1, lam, nxt)
        cur, nxt = nxt, cur
    return cur


def _planar(raster: RasterF) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(raster.data, 2, 0))


def _interleaved(planes: np.ndarray) -> RasterF:
    return RasterF(np.moveaxis(planes, 0, 2))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _coefficient_divisor(channels: int, kappa: float) -> float:
    if channels not in (1, 3):
        raise RasterError(f"guide must have 1 or 3 channels, got {channels}")
    return channels * float(kappa)


def edge_coefficients_rgb(guide: RasterF, kappa: float) -> EdgeCoefficients:
    """Coefficients from a grey or RGB guide (mean absolute channel difference)."""
    guide = as_raster(guide)
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa!r}")
    divisor = _coefficient_divisor(guide.channels, kappa)
    ce = np.empty((guide.height, guide.width - 1))
    cs = np.empty((guide.height - 1, guide.width))
    _edge_coeffs(_planar(guide), divisor, ce, cs)
    return EdgeCoefficients.from_edges(ce, cs)


def combine_min(c1: EdgeCoefficients, c2: EdgeCoefficients) -> EdgeCoefficients:
    """Per-edge minimum, so an edge in either guide blocks diffusion."""
    if c1.data.shape != c2.data.shape:
        raise RasterError(f"coefficient shapes differ: {c1.data.shape} vs {c2.data.shape}")
    return EdgeCoefficients(np.minimum(c1.data, c2.data))


def diffuse_step(image: RasterF, coeffs: EdgeCoefficients, step: float) -> RasterF:
    """One explicit diffusion step, channels updated independently."""
    image = as_raster(image)
    check_step(step)
    if (coeffs.height, coeffs.width) != (image.height, image.width):
        raise RasterError(
            f"coefficients are {coeffs.height}x{coeffs.width}, image is {image.height}x{image.width}"
        )
    out = np.empty((image.channels, image.height, image.width))
    _step(
        _planar(image),
        np.ascontiguousarray(coeffs.east),
        np.ascontiguousarray(coeffs.south),
        float(step),
        out,
    )
    return _interleaved(out)


def perona_malik(image: RasterF, params: GadParams) -> RasterF:
    """Self-guided anisotropic diffusion: coefficients come from the image itself."""
    image = as_raster(image)
    divisor = _coefficient_divisor(image.channels, params.kappa)
    if params.iterations == 0:
        return image
    out = _perona_malik_loop(_planar(image), divisor, float(params.step), params.iterations)
    return _interleaved(out)


def gad(guides: Sequence[RasterF], target: RasterF, params: GadParams) -> RasterF:
    """Filter ``target`` with coefficients taken from one or two guide images.

    ``target`` may have any number of channels; all share the same
    coefficients. The guides are not modified.
    """
    guides = [as_raster(g) for g in guides]
    target = as_raster(target)
    if not 1 <= len(guides) <= 2:
        raise RasterError(f"gad needs one or two guides, got {len(guides)}")
    for i, g in enumerate(guides):
        if (g.height, g.width) != (target.height, target.width):
            raise RasterError(
                f"guide {i} is {g.height}x{g.width}, target is {target.height}x{target.width}"
            )
    divisors = [_coefficient_divisor(g.channels, params.kappa) for g in guides]
    if params.iterations == 0:
        return target
    out = _gad_loop(
        _planar(guides[0]), divisors[0], _planar(guides[-1]), divisors[-1], len(guides),
        _planar(target), float(params.step), params.iterations, bool(params.freeze_guides),
    )
    return _interleaved(out)
