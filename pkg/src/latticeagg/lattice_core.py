"""Calibrators, lattices, their interpolation kernels and monotonicity projections.

A :class:`Calibrator` is a 1-d piecewise-linear lookup table and a
:class:`Lattice` is a multilinearly interpolated lookup table on the unit box.
Both are treated as immutable values; projections return new objects.

Scalar entry points (``calibrate``, ``interpolate`` and friends) mirror the
vectorized kernels (``calibrate_batch``, ``lattice_batch``) that the model and
trainer use, and are implemented on top of them so both agree bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from latticeagg.errors import MissingValueUnsupported, ProjectionFailure, ShapeError

INCREASING = "increasing"
DECREASING = "decreasing"
NONE = "none"
MONOTONICITIES = (INCREASING, DECREASING, NONE)


def _as_bounds(bounds) -> Tuple[float, float]:
    lo, hi = (float(b) for b in bounds)
    if not lo <= hi:
        raise ValueError(f"invalid bounds {bounds!r}")
    return lo, hi


@dataclasses.dataclass(frozen=True, eq=False)
class Calibrator:
    """1-d piecewise-linear function stored as keypoint/value pairs.

    Attributes
    ----------
    keypoints : ndarray
        Strictly increasing input positions, at least two.
    values : ndarray
        Output at each keypoint.
    output_bounds : tuple of float
        Closed interval the outputs are constrained to.
    monotonic : bool
        If set, ``values`` must be non-decreasing.
    missing_value_output : float or None
        Output used for a missing input. ``None`` means missing inputs raise.
    """

    keypoints: np.ndarray
    values: np.ndarray
    output_bounds: Tuple[float, float] = (0.0, 1.0)
    monotonic: bool = True
    missing_value_output: Optional[float] = None

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=float)
        vals = np.array(self.values, dtype=float)
        if kp.ndim != 1 or kp.size < 2:
            raise ValueError("a calibrator needs at least two keypoints")
        if not np.all(np.diff(kp) > 0):
            raise ValueError("keypoints must be strictly increasing")
        if vals.shape != kp.shape:
            raise ValueError("values and keypoints must have the same length")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "output_bounds", _as_bounds(self.output_bounds))
        if self.missing_value_output is not None:
            object.__setattr__(self, "missing_value_output", float(self.missing_value_output))

    def replace(self, **changes) -> "Calibrator":
        return dataclasses.replace(self, **changes)

    def violations(self) -> float:
        """Largest constraint violation (0.0 when feasible)."""
        lo, hi = self.output_bounds
        worst = 0.0
        vals = self.values
        if self.missing_value_output is not None:
            vals = np.append(vals, self.missing_value_output)
        worst = max(worst, float(np.max(lo - vals, initial=0.0)), float(np.max(vals - hi, initial=0.0)))
        if self.monotonic:
            worst = max(worst, float(np.max(-np.diff(self.values), initial=0.0)))
        return worst

    def is_feasible(self, tol: float = 0.0) -> bool:
        return self.violations() <= tol

    def to_dict(self) -> dict:
        return {
            "keypoints": self.keypoints.tolist(),
            "values": self.values.tolist(),
            "output_bounds": [_bound_to_json(b) for b in self.output_bounds],
            "monotonic": self.monotonic,
            "missing_value_output": self.missing_value_output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Calibrator":
        lo, hi = d.get("output_bounds", [None, None])
        return cls(
            keypoints=d["keypoints"],
            values=d["values"],
            output_bounds=(_bound_from_json(lo, -math.inf), _bound_from_json(hi, math.inf)),
            monotonic=bool(d.get("monotonic", True)),
            missing_value_output=d.get("missing_value_output"),
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Lattice:
    """Multilinear interpolated lookup table over ``[0, 1]^D``.

    ``params`` is stored flat in row-major (C) order of the multi-index, i.e.
    the last dimension varies fastest.
    """

    dim_sizes: Tuple[int, ...]
    params: np.ndarray
    param_bounds: Tuple[float, float] = (-1.0, 1.0)
    monotone_dims: Tuple[str, ...] = ()

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.dim_sizes)
        if not sizes or any(s < 2 for s in sizes):
            raise ValueError("every lattice dimension needs at least 2 vertices")
        params = np.array(self.params, dtype=float).ravel()
        if params.size != math.prod(sizes):
            raise ShapeError(f"expected {math.prod(sizes)} params, got {params.size}")
        mono = tuple(self.monotone_dims) or (NONE,) * len(sizes)
        if len(mono) != len(sizes) or any(m not in MONOTONICITIES for m in mono):
            raise ValueError(f"bad monotone_dims {self.monotone_dims!r}")
        object.__setattr__(self, "dim_sizes", sizes)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "param_bounds", _as_bounds(self.param_bounds))
        object.__setattr__(self, "monotone_dims", mono)

    @property
    def num_dims(self) -> int:
        return len(self.dim_sizes)

    @property
    def strides(self) -> Tuple[int, ...]:
        strides, acc = [], 1
        for s in reversed(self.dim_sizes):
            strides.append(acc)
            acc *= s
        return tuple(reversed(strides))

    def grid(self) -> np.ndarray:
        """Params reshaped to the ``dim_sizes`` grid (a view)."""
        return self.params.reshape(self.dim_sizes)

    def replace(self, **changes) -> "Lattice":
        return dataclasses.replace(self, **changes)

    def violations(self) -> float:
        lo, hi = self.param_bounds
        p = self.params
        worst = max(float(np.max(lo - p, initial=0.0)), float(np.max(p - hi, initial=0.0)))
        grid = self.grid()
        for axis, mono in enumerate(self.monotone_dims):
            if mono == NONE:
                continue
            diff = np.diff(grid, axis=axis)
            if mono == DECREASING:
                diff = -diff
            worst = max(worst, float(np.max(-diff, initial=0.0)))
        return worst

    def is_feasible(self, tol: float = 0.0) -> bool:
        return self.violations() <= tol

    def to_dict(self) -> dict:
        return {
            "dim_sizes": list(self.dim_sizes),
            "params": self.params.tolist(),
            "param_bounds": [_bound_to_json(b) for b in self.param_bounds],
            "monotone_dims": list(self.monotone_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Lattice":
        lo, hi = d.get("param_bounds", [None, None])
        return cls(
            dim_sizes=tuple(d["dim_sizes"]),
            params=d["params"],
            param_bounds=(_bound_from_json(lo, -math.inf), _bound_from_json(hi, math.inf)),
            monotone_dims=tuple(d.get("monotone_dims", ())),
        )


def _bound_to_json(b: float):
    # JSON has no infinities; null marks an open side.
    return None if math.isinf(b) else b


def _bound_from_json(b, default: float) -> float:
    return default if b is None else float(b)


# ---------------------------------------------------------------------------
# Calibrator kernels
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class CalibratorTrace:
    """Per-input intermediate quantities of a batched calibration.

    ``lower`` indexes the left keypoint of the active segment and ``frac`` is
    the interpolation weight of the right keypoint, so the weight vector of
    input ``i`` is ``(1 - frac[i])`` at ``lower[i]`` and ``frac[i]`` at
    ``lower[i] + 1``. Missing inputs carry ``lower = 0, frac = 0`` and are
    flagged in ``missing``.
    """

    output: np.ndarray
    lower: np.ndarray
    frac: np.ndarray
    slope: np.ndarray
    missing: np.ndarray


def calibrate_batch(cal: Calibrator, x) -> CalibratorTrace:
    """Vectorized calibration; NaN entries of ``x`` are missing inputs."""
    x = np.asarray(x, dtype=float)
    kp, vals = cal.keypoints, cal.values
    missing = np.isnan(x)
    if missing.any() and cal.missing_value_output is None:
        raise MissingValueUnsupported("missing input and calibrator has no missing_value_output")
    xs = np.where(missing, kp[0], x)
    inside = (xs >= kp[0]) & (xs <= kp[-1])
    xc = np.clip(xs, kp[0], kp[-1])
    lower = np.clip(np.searchsorted(kp, xc, side="right") - 1, 0, kp.size - 2)
    width = kp[lower + 1] - kp[lower]
    frac = (xc - kp[lower]) / width
    rise = vals[lower + 1] - vals[lower]
    out = vals[lower] + frac * rise
    slope = np.where(inside & ~missing, rise / width, 0.0)
    if missing.any():
        out = np.where(missing, cal.missing_value_output, out)
        frac = np.where(missing, 0.0, frac)
    lo, hi = cal.output_bounds
    out = np.clip(out, lo, hi)
    return CalibratorTrace(output=out, lower=lower, frac=frac, slope=slope, missing=missing)


def _is_missing(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def calibrate(cal: Calibrator, x: Optional[float]) -> float:
    """Evaluate a calibrator at one input (``None`` or NaN means missing)."""
    if _is_missing(x):
        if cal.missing_value_output is None:
            raise MissingValueUnsupported("missing input and calibrator has no missing_value_output")
        return cal.missing_value_output
    return float(calibrate_batch(cal, np.array([x], dtype=float)).output[0])


def calibrate_gradient(cal: Calibrator, x: float) -> Tuple[np.ndarray, float]:
    """Interpolation weights over ``cal.values`` and the slope w.r.t. ``x``.

    Clamped inputs put a single unit weight on the endpoint and have slope 0.
    """
    tr = calibrate_batch(cal, np.array([x], dtype=float))
    weights = np.zeros(cal.keypoints.size)
    i, t = int(tr.lower[0]), float(tr.frac[0])
    weights[i] += 1.0 - t
    weights[i + 1] += t
    return weights, float(tr.slope[0])


# ---------------------------------------------------------------------------
# Lattice kernels
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class LatticeTrace:
    """Per-point corner indices, corner weights and partial derivatives."""

    output: np.ndarray
    corners: np.ndarray  # (n, 2**D) flat param indices
    weights: np.ndarray  # (n, 2**D) multilinear coefficients
    partials: Optional[np.ndarray]  # (n, D)


def _cell_positions(lat: Lattice, points: np.ndarray):
    n, dims = points.shape
    lower = np.empty((n, dims), dtype=np.int64)
    frac = np.empty((n, dims))
    for d, size in enumerate(lat.dim_sizes):
        pos = np.clip(points[:, d], 0.0, 1.0) * (size - 1)
        # Snap float noise so that vertex coordinates hit vertices exactly.
        near = np.rint(pos)
        pos = np.where(np.abs(pos - near) <= 8 * np.finfo(float).eps * size, near, pos)
        lo = np.clip(np.floor(pos).astype(np.int64), 0, size - 2)
        lower[:, d] = lo
        frac[:, d] = pos - lo
    return lower, frac


def lattice_batch(lat: Lattice, points, with_partials: bool = True) -> LatticeTrace:
    """Vectorized multilinear interpolation of ``points`` with shape (n, D)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != lat.num_dims:
        raise ShapeError(f"expected points of shape (n, {lat.num_dims}), got {points.shape}")
    n, dims = points.shape
    lower, frac = _cell_positions(lat, points)
    strides = np.asarray(lat.strides, dtype=np.int64)
    scale = np.asarray(lat.dim_sizes, dtype=float) - 1.0
    ncorner = 1 << dims
    base = lower @ strides
    corners = np.empty((n, ncorner), dtype=np.int64)
    weights = np.empty((n, ncorner))
    out = np.zeros(n)
    partials = np.zeros((n, dims)) if with_partials else None
    ones = np.ones((n, 1))
    for c in range(ncorner):
        bits = np.array([(c >> (dims - 1 - d)) & 1 for d in range(dims)], dtype=bool)
        factors = np.where(bits, frac, 1.0 - frac)
        corners[:, c] = base + strides @ bits
        weights[:, c] = np.prod(factors, axis=1)
        vals = lat.params[corners[:, c]]
        out += weights[:, c] * vals
        if with_partials:
            # Product of every factor except dim d, via prefix/suffix products.
            prefix = np.cumprod(np.hstack([ones, factors[:, :-1]]), axis=1)
            suffix = np.cumprod(np.hstack([ones, factors[:, :0:-1]]), axis=1)[:, ::-1]
            sign = np.where(bits, 1.0, -1.0) * scale
            partials += (prefix * suffix) * sign * vals[:, None]
    lo, hi = lat.param_bounds
    out = np.clip(out, lo, hi)
    return LatticeTrace(output=out, corners=corners, weights=weights, partials=partials)


def interpolate(lat: Lattice, point: Sequence[float]) -> float:
    """Multilinear interpolation at one point of the unit box."""
    point = np.asarray(point, dtype=float)
    if point.ndim != 1 or point.size != lat.num_dims:
        raise ShapeError(f"expected a point with {lat.num_dims} coordinates, got shape {point.shape}")
    return float(lattice_batch(lat, point[None, :], with_partials=False).output[0])


def lattice_gradient(lat: Lattice, point: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Weights over all params and partial derivatives w.r.t. each coordinate."""
    point = np.asarray(point, dtype=float)
    if point.ndim != 1 or point.size != lat.num_dims:
        raise ShapeError(f"expected a point with {lat.num_dims} coordinates, got shape {point.shape}")
    tr = lattice_batch(lat, point[None, :])
    weights = np.zeros(lat.params.size)
    np.add.at(weights, tr.corners[0], tr.weights[0])
    return weights, tr.partials[0].copy()


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


def isotonic_regression(y, weights=None) -> np.ndarray:
    """L2 projection of ``y`` onto non-decreasing sequences (pool adjacent violators)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n <= 1:
        return y.copy()
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    # Blocks as parallel stacks: weighted sum, total weight, length.
    sums, wts, lens = [], [], []
    for i in range(n):
        s, wt, ln = y[i] * w[i], w[i], 1
        while sums and sums[-1] / wts[-1] > s / wt:
            s += sums.pop()
            wt += wts.pop()
            ln += lens.pop()
        sums.append(s)
        wts.append(wt)
        lens.append(ln)
    return np.repeat([s / wt for s, wt in zip(sums, wts)], lens)


def _isotonic_rows(rows: np.ndarray) -> np.ndarray:
    """Row-wise isotonic regression of a 2-d array."""
    if rows.shape[1] == 2:
        a, b = rows[:, 0], rows[:, 1]
        bad = a > b
        mean = (a + b) / 2.0
        return np.stack([np.where(bad, mean, a), np.where(bad, mean, b)], axis=1)
    out = rows.copy()
    bad = np.any(np.diff(rows, axis=1) < 0, axis=1)
    for r in np.flatnonzero(bad):
        out[r] = isotonic_regression(rows[r])
    return out


def project_calibrator(cal: Calibrator) -> Calibrator:
    """Nearest feasible calibrator: isotonic regression (if monotonic), then clip."""
    vals = cal.values
    if cal.monotonic:
        vals = isotonic_regression(vals)
    lo, hi = cal.output_bounds
    vals = np.clip(vals, lo, hi)
    missing = cal.missing_value_output
    if missing is not None:
        missing = float(min(max(missing, lo), hi))
    return cal.replace(values=vals, missing_value_output=missing)


def _fiber_project(grid: np.ndarray, axis: int, mono: str) -> np.ndarray:
    moved = np.moveaxis(grid, axis, -1)
    shape = moved.shape
    rows = moved.reshape(-1, shape[-1])
    if mono == DECREASING:
        rows = -_isotonic_rows(-rows)
    else:
        rows = _isotonic_rows(rows)
    return np.moveaxis(rows.reshape(shape), -1, axis)


def _max_violation(grid: np.ndarray, constrained) -> float:
    worst = 0.0
    for axis, mono in constrained:
        diff = np.diff(grid, axis=axis)
        if mono == DECREASING:
            diff = -diff
        worst = max(worst, float(np.max(-diff, initial=0.0)))
    return worst


def project_lattice(lat: Lattice, tol: float = 1e-9, max_sweeps: int = 10_000) -> Lattice:
    """Project lattice params onto the monotone, bounded set.

    Alternates exact isotonic sweeps along every fiber of each constrained
    dimension until the largest violation drops below ``tol``. A cumulative
    max pass along each constrained dimension then removes the residual
    (at most ``tol``) violations exactly; it preserves monotonicity along the
    other dimensions, as does the final clip to ``param_bounds``.
    """
    grid = lat.grid().copy()
    constrained = [(a, m) for a, m in enumerate(lat.monotone_dims) if m != NONE]
    if constrained:
        sweeps = 0
        while _max_violation(grid, constrained) >= tol:
            if sweeps >= max_sweeps:
                raise ProjectionFailure(f"lattice projection did not converge in {max_sweeps} sweeps")
            for axis, mono in constrained:
                grid = _fiber_project(grid, axis, mono)
            sweeps += 1
        for axis, mono in constrained:
            if mono == INCREASING:
                grid = np.maximum.accumulate(grid, axis=axis)
            else:
                flipped = np.flip(grid, axis=axis)
                grid = np.flip(np.maximum.accumulate(flipped, axis=axis), axis=axis)
    lo, hi = lat.param_bounds
    grid = np.clip(grid, lo, hi)
    out = lat.replace(params=grid.ravel())
    if not out.is_feasible():
        raise ProjectionFailure(f"projected lattice still violates constraints by {out.violations():.3g}")
    return out
