"""Semi-Lagrangian value-function solver on space-time boxes.

The value function

    u(t, x) = inf { g(eta(T0)) + int_T0^t |beta|^q' / (q' lam^q') + f(s, eta) ds - eps (t - T0) }

over paths with ``eta' = A_h eta + P0 beta`` and ``eta(t) = x`` is advanced
slice by slice: each node looks back along the exact characteristic of a
constant control over one time step and takes the best of a polar sample of
controls, refined by a short pattern search. All grids live in the adapted
coordinates of the Kalman frame.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DomainMismatchError, GridSpecError, InvalidInputError
from .kalman_geometry import KalmanFrame, build_frame, rescaled_drift
from .scaling import Cylinder, ScaleParams, conjugate_exponent

logger = logging.getLogger(__name__)

NODE_CHUNK = 4096


@dataclass(frozen=True)
class GridSpec:
    """Uniform time grid on ``[T0, T1]`` and a tensor box in adapted coordinates."""

    lows: tuple
    highs: tuple
    shape: tuple
    nt: int
    T0: float = -1.0
    T1: float = 0.0

    def __post_init__(self):
        if not (len(self.lows) == len(self.highs) == len(self.shape)):
            raise GridSpecError("extents and shape must have one entry per axis")
        if any(n < 2 for n in self.shape) or self.nt < 1:
            raise GridSpecError("need at least two nodes per axis and one time step")
        if any(h <= l for l, h in zip(self.lows, self.highs)) or self.T1 <= self.T0:
            raise GridSpecError("empty grid extent")

    @classmethod
    def box(cls, half_widths, shape, nt, T0=-1.0, T1=0.0):
        hw = np.broadcast_to(np.asarray(half_widths, dtype=float), (len(shape),))
        return cls(tuple(-hw), tuple(hw), tuple(int(n) for n in shape), int(nt), float(T0), float(T1))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def steps(self):
        return (np.asarray(self.highs) - np.asarray(self.lows)) / (np.asarray(self.shape) - 1)

    @property
    def dt(self):
        return (self.T1 - self.T0) / self.nt

    @property
    def times(self):
        return np.linspace(self.T0, self.T1, self.nt + 1)

    @property
    def axes(self):
        return [np.linspace(l, h, n) for l, h, n in zip(self.lows, self.highs, self.shape)]

    def nodes(self):
        """Adapted coordinates of all nodes, shape (prod(shape), ndim), C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def radius(self):
        """Largest distance from the origin to a point of the box."""
        corner = np.maximum(np.abs(self.lows), np.abs(self.highs))
        return float(np.linalg.norm(corner))

    def refined(self, factor=2):
        return GridSpec(self.lows, self.highs, tuple((n - 1) * factor + 1 for n in self.shape),
                        self.nt * factor, self.T0, self.T1)

    def to_dict(self):
        return {"lows": list(self.lows), "highs": list(self.highs), "shape": list(self.shape),
                "nt": self.nt, "T0": self.T0, "T1": self.T1}


def multilinear(values, lows, steps, points):
    """Multilinear interpolation with constant extension outside the box.

    ``values`` has shape (n_1, ..., n_D); ``points`` has shape (..., D).
    """
    values = np.asarray(values)
    points = np.asarray(points, dtype=float)
    D = values.ndim
    lead = points.shape[:-1]
    pts = points.reshape(-1, D)
    idx, frac = [], []
    for d in range(D):
        n = values.shape[d]
        s = (pts[:, d] - lows[d]) / steps[d]
        s = np.clip(s, 0.0, n - 1.0)
        i = np.minimum(np.floor(s).astype(np.intp), n - 2)
        idx.append(i)
        frac.append(s - i)
    strides = np.array(values.strides) // values.itemsize
    flat = values.ravel()
    base = sum(idx[d] * strides[d] for d in range(D))
    out = np.zeros(pts.shape[0])
    for corner in itertools.product((0, 1), repeat=D):
        w = np.ones(pts.shape[0])
        off = 0
        for d, c in enumerate(corner):
            w = w * (frac[d] if c else 1.0 - frac[d])
            off += c * strides[d]
        out += w * flat[base + off]
    return out.reshape(lead)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Samples ``values[k, i_1, ..., i_N]`` at time ``times[k]`` and adapted node ``(i_1..i_N)``.

    ``func``, when present, is an exact evaluator ``(t, X) -> values`` in
    ambient coordinates; analysis routines prefer it over interpolation.
    """

    frame: KalmanFrame
    grid: GridSpec
    values: np.ndarray
    h: float = 0.0
    meta: dict = field(default_factory=dict)
    func: Optional[Callable] = None

    def __post_init__(self):
        expected = (self.grid.nt + 1,) + tuple(self.grid.shape)
        if self.values.shape != expected:
            raise GridSpecError(f"values shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise GridSpecError("grid function has non-finite values")

    @classmethod
    def from_callable(cls, frame, grid, func, h=0.0, keep_func=True, meta=None):
        Y = grid.nodes()
        X = frame.from_adapted(Y)
        vals = np.stack([np.asarray(func(np.full(Y.shape[0], t), X), dtype=float).reshape(grid.shape)
                         for t in grid.times])
        return cls(frame, grid, vals, h, dict(meta or {}), func if keep_func else None)

    def interpolate_adapted(self, t, Y):
        t = np.asarray(t, dtype=float)
        Y = np.asarray(Y, dtype=float)
        pts = np.concatenate([t[..., None], Y], axis=-1)
        lows = (self.grid.T0,) + tuple(self.grid.lows)
        steps = (self.grid.dt,) + tuple(self.grid.steps)
        return multilinear(self.values, lows, steps, pts)

    def __call__(self, t, X):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        t = np.broadcast_to(t, X.shape[:1])
        if self.func is not None:
            return np.asarray(self.func(t, X), dtype=float)
        return self.interpolate_adapted(t, self.frame.to_adapted(X))

    def slice_at(self, k):
        return self.values[k]

    def save(self, path):
        """Raw little-endian f64 values plus a JSON header next to them."""
        path = Path(path)
        self.values.astype("<f8").tofile(path)
        header = {"dims": list(self.values.shape), "extents": [list(p) for p in zip(self.grid.lows, self.grid.highs)],
                  "dt": self.grid.dt, "T0": self.grid.T0, "T1": self.grid.T1, "h": self.h,
                  "frame": self.frame.to_dict(),
                  "meta": {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool, list))}}
        Path(str(path) + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        header = json.loads(Path(str(path) + ".json").read_text())
        dims = header["dims"]
        values = np.fromfile(path, dtype="<f8").reshape(dims)
        lows, highs = zip(*header["extents"])
        grid = GridSpec(tuple(lows), tuple(highs), tuple(dims[1:]), dims[0] - 1, header["T0"], header["T1"])
        return cls(KalmanFrame.from_dict(header["frame"]), grid, values, header.get("h", 0.0), header.get("meta", {}))


@dataclass(frozen=True, eq=False)
class SourceTerm:
    """Non-negative source sampled as cell averages on a space-time grid.

    Outside the flowed unit ball the samples are read at the radial
    projection ``exp(t A_h) y/|y|`` with ``y = exp(-t A_h) x``.
    """

    samples: GridFunction
    p: float = np.inf
    project: bool = True

    def __post_init__(self):
        if np.any(self.samples.values < 0):
            raise InvalidInputError("sampled source must be non-negative")

    @property
    def lp_norm(self):
        g = self.samples.grid
        cell = np.prod(g.steps) * g.dt
        v = self.samples.values
        if np.isinf(self.p):
            return float(v.max())
        return float((np.sum(v ** self.p) * cell) ** (1.0 / self.p))

    def evaluate_adapted(self, t, Y, Ah_adapted):
        Y = np.asarray(Y, dtype=float)
        if self.project:
            y = Y @ expm(-t * Ah_adapted).T
            ny = np.linalg.norm(y, axis=1)
            outside = ny > 1.0
            if np.any(outside):
                Y = Y.copy()
                Y[outside] = (y[outside] / ny[outside, None]) @ expm(t * Ah_adapted).T
        return self.samples.interpolate_adapted(np.full(Y.shape[0], t), Y)


@dataclass(frozen=True, eq=False)
class ParabolicBoundary:
    """Bottom data at ``T0`` and lateral data on the flowed unit sphere."""

    bottom: Callable
    lateral: Optional[Callable] = None

    @staticmethod
    def lateral_points(frame, h, t, directions):
        """``exp(t A_h) u`` for unit vectors ``u``; these satisfy ``|exp(-t A_h) x| = 1``."""
        U = np.asarray(directions, dtype=float)
        U = U / np.linalg.norm(U, axis=1, keepdims=True)
        return U @ expm(t * rescaled_drift(frame, None, h)).T


@dataclass(frozen=True, eq=False)
class HJProblem:
    """Data of the value-function problem.

    ``source`` is either a constant ``c0`` or a :class:`SourceTerm`;
    ``eps_drift`` subtracts ``eps (t - T0)``. With lateral data the solve is a
    Dirichlet problem on the flowed cylinder of radius ``cylinder_radius``;
    without it every node of the box is evolved.
    """

    frame: KalmanFrame
    boundary: ParabolicBoundary
    h: float = 0.0
    q: float = 2.0
    lam: float = 1.0
    source: object = 0.0
    eps_drift: float = 0.0
    cylinder_radius: float = 1.0

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidInputError("coercivity constant must be positive")
        if self.h < 0:
            raise InvalidInputError("h must be non-negative")
        conjugate_exponent(self.q)
        if not isinstance(self.source, SourceTerm) and self.source < 0:
            raise InvalidInputError("constant source must be non-negative")

    @property
    def q_conj(self):
        return conjugate_exponent(self.q)


@dataclass(frozen=True)
class ControlGrid:
    """Polar control sample: ``n_radii`` geometric radii times ``n_dirs`` directions per plane."""

    b_max: Optional[float] = None
    n_radii: int = 16
    n_dirs: int = 16
    refine_rounds: int = 4
    b_min: Optional[float] = None


def default_b_max(problem, grid):
    nodes = problem.frame.from_adapted(grid.nodes())
    g = problem.boundary.bottom(nodes)
    osc = float(np.max(g) - np.min(g))
    return 10.0 * osc ** (1.0 / problem.q_conj) * grid.radius / (grid.T1 - grid.T0)


def _directions(n0, n_dirs):
    if n0 == 1:
        return np.array([[1.0], [-1.0]])
    if n0 == 2:
        ang = 2 * np.pi * np.arange(n_dirs) / n_dirs
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # Fibonacci-type lattice on the sphere, count scaled with the dimension.
    count = n_dirs * (n0 - 1) * (n0 - 1)
    rng = np.random.default_rng(12345)
    v = rng.normal(size=(count, n0))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def control_samples(n0, controls: ControlGrid, b_max, dt, q_conj):
    """Zero plus the polar grid of radii in ``[b_min, b_max]``."""
    if b_max <= 0:
        return np.zeros((1, n0)), 0.0
    b_min = controls.b_min
    if b_min is None:
        b_min = min(dt ** (1.0 / (q_conj - 1.0)), b_max / 64.0)
    radii = np.geomspace(b_min, b_max, controls.n_radii)
    dirs = _directions(n0, controls.n_dirs)
    samples = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, n0)
    return np.vstack([np.zeros((1, n0)), samples]), b_min


def _step_operators(Ah_adapted, dt, n0):
    """``exp(-dt A)`` and ``int_0^dt exp(-s A) ds`` restricted to the control block."""
    N = Ah_adapted.shape[0]
    big = np.zeros((2 * N, 2 * N))
    big[:N, :N] = -Ah_adapted
    big[:N, N:] = np.eye(N)
    E = expm(dt * big)
    return E[:N, :N], E[:N, N:][:, :n0]


def solve_value(problem: HJProblem, grid: GridSpec, controls: ControlGrid = ControlGrid()):
    """Forward dynamic programming for the value function.

    Parameters
    ----------
    problem : HJProblem
    grid : GridSpec
        Box in adapted coordinates; the CFL-type condition
        ``dt <= cell / (||A_h|| R + B_max)`` must hold.
    controls : ControlGrid

    Returns
    -------
    GridFunction
        ``meta`` records ``b_max``, the saturation fraction and a warning flag.
    """
    frame = problem.frame
    if grid.ndim != frame.N:
        raise GridSpecError(f"grid has {grid.ndim} axes for a state of dimension {frame.N}")
    Ah = frame.Q.T @ rescaled_drift(frame, None, problem.h) @ frame.Q
    qc, lam = problem.q_conj, problem.lam
    dt = grid.dt
    b_max = default_b_max(problem, grid) if controls.b_max is None else float(controls.b_max)
    cell = float(np.min(grid.steps))
    speed = np.linalg.norm(Ah, 2) * grid.radius + b_max
    if speed > 0 and dt > cell / speed * (1 + 1e-12):
        raise GridSpecError(
            f"time step {dt:.4g} exceeds cell/(|A_h| R + B_max) = {cell / speed:.4g}; "
            "refine the time grid or lower B_max")
    n0 = frame.n[0]
    samples, b_min = control_samples(n0, controls, b_max, dt, qc)
    back, drive = _step_operators(Ah, dt, n0)
    Y = grid.nodes()
    X = frame.from_adapted(Y)
    lows, steps = np.asarray(grid.lows), grid.steps
    values = np.empty((grid.nt + 1,) + tuple(grid.shape))
    values[0] = problem.boundary.bottom(X).reshape(grid.shape)
    radius = problem.cylinder_radius
    lateral = problem.boundary.lateral
    running = lambda B: np.linalg.norm(B, axis=-1) ** qc / (qc * lam ** qc)
    saturated = evaluated = 0
    base_all = Y @ back.T
    for k in range(grid.nt):
        t = grid.T0 + k * dt
        t_new = t + dt
        prev = values[k]
        if isinstance(problem.source, SourceTerm):
            fvals = problem.source.evaluate_adapted(t, Y, Ah)
        else:
            fvals = np.full(Y.shape[0], float(problem.source))
        if lateral is not None:
            flowed = np.linalg.norm(Y @ expm(-t_new * Ah).T, axis=1)
            active = np.flatnonzero(flowed < radius)
        else:
            active = np.arange(Y.shape[0])
        new = np.empty(Y.shape[0])
        for start in range(0, active.size, NODE_CHUNK):
            sel = active[start:start + NODE_CHUNK]
            base = base_all[sel]
            best, bval = _minimise(prev, lows, steps, base, drive, samples, running, dt, b_max,
                                   b_min, controls.refine_rounds)
            new[sel] = bval + dt * fvals[sel]
            if b_max > 0:
                saturated += int(np.sum(np.linalg.norm(best, axis=1) >= b_max * (1 - 1e-9)))
            evaluated += sel.size
        if lateral is not None:
            out = np.setdiff1d(np.arange(Y.shape[0]), active, assume_unique=True)
            if out.size:
                yflow = Y[out] @ expm(-t_new * Ah).T
                proj = (yflow / np.linalg.norm(yflow, axis=1, keepdims=True) * radius) @ expm(t_new * Ah).T
                new[out] = lateral(np.full(out.size, t_new), frame.from_adapted(proj))
        new -= problem.eps_drift * dt
        values[k + 1] = new.reshape(grid.shape)
    frac = saturated / max(evaluated, 1)
    meta = {"b_max": b_max, "b_min": b_min, "saturation_fraction": frac,
            "saturation_warning": bool(frac > 0.01), "dt": dt, "controls": int(samples.shape[0]),
            "q": problem.q, "lam": lam}
    if frac > 0.01:
        logger.warning("control bound saturated at %.1f%% of minimisers", 100 * frac)
    return GridFunction(frame, grid, values, problem.h, meta)


def _minimise(prev, lows, steps, base, drive, samples, running, dt, b_max, b_min, rounds):
    """Best control per node: polar sample, then a shrinking compass search."""
    m = base.shape[0]
    feet = base[:, None, :] - (samples @ drive.T)[None, :, :]
    vals = multilinear(prev, lows, steps, feet) + dt * running(samples)[None, :]
    j = np.argmin(vals, axis=1)
    best = samples[j]
    bval = vals[np.arange(m), j]
    if rounds <= 0 or b_max <= 0:
        return best, bval
    n0 = samples.shape[1]
    stencil = np.vstack([np.eye(n0), -np.eye(n0)])
    nb = np.linalg.norm(best, axis=1)
    ratio = (b_max / b_min) ** (1.0 / 15.0) if b_min > 0 else 2.0
    rho = np.maximum(nb * (ratio - 1.0), b_min)
    for _ in range(rounds):
        cand = best[:, None, :] + rho[:, None, None] * stencil[None, :, :]
        norms = np.linalg.norm(cand, axis=2, keepdims=True)
        cand = np.where(norms > b_max, cand * (b_max / np.maximum(norms, 1e-300)), cand)
        feet = base[:, None, :] - cand @ drive.T
        cv = multilinear(prev, lows, steps, feet) + dt * running(cand)
        jj = np.argmin(cv, axis=1)
        cbest = cv[np.arange(m), jj]
        improve = cbest < bval
        best = np.where(improve[:, None], cand[np.arange(m), jj], best)
        bval = np.where(improve, cbest, bval)
        rho = np.where(improve, rho, 0.5 * rho)
    return best, bval


def two_level_data(frame, h, delta, gamma, inner, outer=1.0, ramp=0.5, scale=2.0):
    """Bottom data: ``inner`` where ``exp(A_h) x`` lies in ``scale * Omega_delta``, ``outer`` far out.

    ``Omega_delta = {|S(delta)^{-1} z| < delta**gamma}``; the two levels are
    joined by a linear ramp in the normalised gauge over ``[1, 1 + ramp]``.
    ``inner`` may be a constant or a callable of the points.
    """
    flow = expm(rescaled_drift(frame, None, h))
    M = frame.S_inv(delta) @ flow

    def g(X):
        X = np.atleast_2d(X)
        level = np.linalg.norm(X @ M.T, axis=1) / (scale * delta ** gamma)
        w = np.clip((level - 1.0) / ramp, 0.0, 1.0)
        lo = inner(X) if callable(inner) else inner
        return (1.0 - w) * lo + w * outer

    return g


def _cylinder_nodes(u: GridFunction, radius=1.0):
    """Boolean mask (nt+1, *shape) of nodes inside the flowed ball, excluding the bottom slice."""
    frame, grid = u.frame, u.grid
    Ah = frame.Q.T @ rescaled_drift(frame, None, u.h) @ frame.Q
    Y = grid.nodes()
    mask = np.zeros((grid.nt + 1, Y.shape[0]), dtype=bool)
    for k, t in enumerate(grid.times):
        if k == 0:
            continue
        mask[k] = np.linalg.norm(Y @ expm(-t * Ah).T, axis=1) < radius
    return mask.reshape((grid.nt + 1,) + tuple(grid.shape))


def _lateral_samples(u: GridFunction, count=64, radius=1.0):
    """Values of ``u`` on the flowed sphere at every time slice after the first."""
    N = u.frame.N
    if N == 1:
        dirs = np.array([[1.0], [-1.0]])
    elif N == 2:
        ang = 2 * np.pi * np.arange(count) / count
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        v = np.random.default_rng(7).normal(size=(count * N, N))
        dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    out = []
    for t in u.grid.times[1:]:
        pts = ParabolicBoundary.lateral_points(u.frame, u.h, t, dirs) * radius
        out.append(u(np.full(pts.shape[0], t), pts))
    return np.concatenate(out)


def barrier_upper(problem: HJProblem, grid, controls=ControlGrid(), inner_infimum=None):
    """Upper barrier from two-level bottom data.

    The lateral check compares the smallest value on the flowed unit sphere
    with the infimum of the data on the inner set; a positive excess
    ``K_observed`` is the a-posteriori form of the lower bound on the lateral
    boundary.
    """
    u = solve_value(problem, grid, controls)
    lat = _lateral_samples(u)
    if inner_infimum is None:
        inner_infimum = float(np.min(u.values[0]))
    K_obs = float(lat.min() - inner_infimum)
    u.meta.update({"lateral_min": float(lat.min()), "inner_infimum": inner_infimum,
                   "K_observed": K_obs, "lateral_check": bool(K_obs > 0 or lat.min() >= 1 - 1e-9)})
    return u


def barrier_lower(problem: HJProblem, grid, controls=ControlGrid(), tol=1e-9):
    """Lower barrier from data vanishing off the flowed unit ball, with the ``-eps (1+t)`` drift."""
    u = solve_value(problem, grid, controls)
    lat = _lateral_samples(u)
    u.meta.update({"lateral_max": float(lat.max()), "lateral_check": bool(lat.max() <= tol)})
    return u


def parabolic_boundary_mask(u: GridFunction, radius=1.0):
    inside = _cylinder_nodes(u, radius)
    return ~inside


def comparison_check(u_sub: GridFunction, u_super: GridFunction, boundary=None, tol=1e-9):
    """Maximum of ``u_sub - u_super`` on the parabolic boundary and in the interior."""
    if u_sub.values.shape != u_super.values.shape or u_sub.grid != u_super.grid:
        raise DomainMismatchError("comparison requires identical grids")
    if boundary is None:
        boundary = parabolic_boundary_mask(u_sub)
    diff = u_sub.values - u_super.values
    b = float(diff[boundary].max()) if np.any(boundary) else -np.inf
    interior = ~boundary
    i = float(diff[interior].max()) if np.any(interior) else -np.inf
    return {"boundary_violation": max(b, 0.0), "interior_violation": max(i, 0.0),
            "premise_holds": bool(b <= tol), "ok": bool(b > tol or i <= tol)}


def source_multiplier_exponent(frame, q, alpha, p):
    """Exponent of ``r`` in the ``L^p`` norm of the rescaled source."""
    qc = conjugate_exponent(q)
    return 1.0 - (frame.N / q + 1 + frame.homogeneous_dimension) / p - alpha * (1 + frame.N / (p * qc))


def rescale_grid_function(u: GridFunction, params: ScaleParams, p=None, target=None):
    """``u_r(t, x) = r**(-alpha) u(r t, r**gamma S(r) x)`` sampled on ``target``.

    The target box must map inside the source box under the dilation. When
    ``p`` is given, the ``L^p`` multiplier of the rescaled source is attached
    as ``meta['source_multiplier']``.
    """
    frame, r = u.frame, params.r
    target = u.grid if target is None else target
    strata = frame.strata_index
    scale_axes = r ** params.gamma * r ** strata.astype(float)
    tlo, thi = r * target.T0, r * target.T1
    lo = np.asarray(target.lows) * scale_axes
    hi = np.asarray(target.highs) * scale_axes
    eps = 1e-12 * max(1.0, u.grid.radius)
    if (min(tlo, thi) < u.grid.T0 - eps or max(tlo, thi) > u.grid.T1 + eps
            or np.any(np.minimum(lo, hi) < np.asarray(u.grid.lows) - eps)
            or np.any(np.maximum(lo, hi) > np.asarray(u.grid.highs) + eps)):
        raise DomainMismatchError("dilated target grid leaves the source domain")
    Y = target.nodes()
    vals = np.empty((target.nt + 1,) + tuple(target.shape))
    for k, t in enumerate(target.times):
        if u.func is not None:
            v = u.func(np.full(Y.shape[0], r * t), frame.from_adapted(Y * scale_axes))
        else:
            v = u.interpolate_adapted(np.full(Y.shape[0], r * t), Y * scale_axes)
        vals[k] = r ** (-params.alpha) * np.asarray(v).reshape(target.shape)
    func = None
    if u.func is not None:
        S = frame.S(r)
        inner = u.func

        def func(t, X, inner=inner, S=S):
            return r ** (-params.alpha) * np.asarray(inner(r * np.asarray(t), r ** params.gamma * (np.asarray(X) @ S.T)))
    meta = dict(u.meta)
    meta["dilation"] = meta.get("dilation", 1.0) * r
    if p is not None:
        e = source_multiplier_exponent(frame, params.q, params.alpha, p)
        meta["source_multiplier_exponent"] = e
        meta["source_multiplier"] = r ** e
    return GridFunction(frame, target, vals, u.h * r, meta, func)


class SemiLagrangianHJ(BaseEstimator):
    """Estimator front end for :func:`solve_value`.

    ``fit(A, P0, g)`` solves with bottom data ``g``; ``predict`` interpolates
    at rows ``[t, x_1..x_N]``.
    """

    def __init__(self, h=0.0, q=2.0, lam=1.0, half_width=1.25, shape=(33, 33), nt=32,
                 b_max=None, eps_drift=0.0):
        self.h = h
        self.q = q
        self.lam = lam
        self.half_width = half_width
        self.shape = shape
        self.nt = nt
        self.b_max = b_max
        self.eps_drift = eps_drift

    def fit(self, A, P0, g):
        frame = build_frame(A, P0)
        problem = HJProblem(frame, ParabolicBoundary(g), self.h, self.q, self.lam,
                            eps_drift=self.eps_drift)
        grid = GridSpec.box(self.half_width, self.shape, self.nt)
        self.solution_ = solve_value(problem, grid, ControlGrid(b_max=self.b_max))
        return self

    def predict(self, X):
        check_is_fitted(self, "solution_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.solution_(X[:, 0], X[:, 1:])
