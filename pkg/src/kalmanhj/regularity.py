"""Oscillation decay over nested cylinders and anisotropic Hölder exponent fits."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import expm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidInputError, TooCoarseError
from .hj_solver import GridFunction, rescale_grid_function
from .kalman_geometry import rescaled_drift
from .scaling import Cylinder, ScaleParams, conjugate_exponent, modulus_exponents

logger = logging.getLogger(__name__)

MIN_NODES = 8


@dataclass
class OscillationReport:
    h: float
    gamma: float
    radii: list
    osc: list
    nodes: list
    alpha_fit: float = float("nan")
    theta_observed: float = float("nan")
    exhausted: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def levels(self):
        return len(self.osc)

    @property
    def nonincreasing(self):
        o = np.asarray(self.osc)
        return bool(np.all(np.diff(o) <= 1e-12 * max(1.0, o.max(initial=0.0))))

    def to_dict(self):
        return {"h": self.h, "gamma": self.gamma, "radii": list(map(float, self.radii)),
                "osc": list(map(float, self.osc)), "nodes": list(map(int, self.nodes)),
                "alpha_fit": _finite_or_str(self.alpha_fit),
                "theta_observed": _finite_or_str(self.theta_observed),
                "exhausted": self.exhausted, "meta": self.meta}


def _finite_or_str(v):
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _cylinder_lattice(cyl: Cylinder, per_axis=33, n_times=33):
    """Points ``exp(t A_h) r**gamma S(r) z`` for ``z`` on a lattice of the open unit ball."""
    frame = cyl.frame
    Ah = rescaled_drift(frame, None, cyl.h)
    axis = np.linspace(-1.0, 1.0, per_axis)
    Z = np.stack([m.ravel() for m in np.meshgrid(*([axis] * frame.N), indexing="ij")], axis=1)
    Z = Z[np.linalg.norm(Z, axis=1) < 1.0] * (1.0 - 1e-9)
    Z = Z @ frame.Q.T  # lattice taken in adapted coordinates
    M = cyl.r ** cyl.gamma * frame.S(cyl.r)
    ts, Xs = [], []
    for t in np.linspace(-cyl.r, 0.0, n_times):
        Xs.append(Z @ (expm(t * Ah) @ M).T)
        ts.append(np.full(Z.shape[0], t))
    return np.concatenate(ts), np.concatenate(Xs)


def _node_count(u: GridFunction, cyl: Cylinder):
    grid, frame = u.grid, u.frame
    X = frame.from_adapted(grid.nodes())
    times = grid.times
    count = 0
    for t in times[(times >= -cyl.r - 1e-12) & (times <= 1e-12)]:
        count += int(np.sum(cyl.contains_many(np.full(X.shape[0], t), X)))
    return count


def _subcell_slices(u: GridFunction, cyl: Cylinder, subsample=2):
    """Yield ``(t, X)`` per refined time level: the ``subsample``-refined lattice points inside the cylinder."""
    grid, frame = u.grid, u.frame
    Ah = frame.Q.T @ rescaled_drift(frame, None, cyl.h) @ frame.Q
    scale = cyl.r ** cyl.gamma * cyl.r ** frame.strata_index.astype(float)
    k = np.arange(grid.nt * subsample + 1) / subsample
    sub_t = grid.T0 + k * grid.dt
    sub_t = sub_t[(sub_t >= -cyl.r - 1e-12) & (sub_t <= 1e-12)]
    half = np.zeros(frame.N)
    for t in sub_t:
        half = np.maximum(half, np.abs(expm(t * Ah) * scale[None, :]).sum(axis=1))
    axes = []
    for d in range(frame.N):
        step = grid.steps[d] / subsample
        lo = np.floor((-half[d] - grid.lows[d]) / step)
        hi = np.ceil((half[d] - grid.lows[d]) / step)
        idx = np.arange(max(lo, 0), min(hi, (grid.shape[d] - 1) * subsample) + 1)
        axes.append(grid.lows[d] + idx * step)
    Xs = frame.from_adapted(np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1))
    for t in sub_t:
        inside = cyl.contains_many(np.full(Xs.shape[0], t), Xs)
        if np.any(inside):
            yield t, Xs[inside]


def oscillation_details(u: GridFunction, cyl: Cylinder, subsample=2):
    """``(osc, node_count)``; analytic data is sampled on a cylinder-adapted lattice."""
    if u.func is not None:
        t, X = _cylinder_lattice(cyl)
        vals = u.func(t, X)
        return float(np.max(vals) - np.min(vals)), int(t.size)
    count = _node_count(u, cyl)
    if count < MIN_NODES:
        raise TooCoarseError(f"cylinder of radius {cyl.r:g} holds {count} grid nodes (< {MIN_NODES})")
    half = cyl.r ** cyl.gamma * cyl.r ** u.frame.strata_index.astype(float)
    thin = np.flatnonzero(half < np.asarray(u.grid.steps) * (1 - 1e-9))
    if thin.size:
        raise TooCoarseError(f"cylinder of radius {cyl.r:g} is thinner than one cell along adapted axes {thin.tolist()}")
    hi, lo = -np.inf, np.inf
    for t, X in _subcell_slices(u, cyl, subsample):
        vals = u(np.full(X.shape[0], t), X)
        hi, lo = max(hi, float(vals.max())), min(lo, float(vals.min()))
    return hi - lo, count


def oscillation(u: GridFunction, cyl: Cylinder, subsample=2):
    """``max - min`` of ``u`` over the cylinder.

    Raises :class:`TooCoarseError` when fewer than eight grid nodes fall inside
    or the cylinder is thinner than one cell along some adapted axis.
    """
    return oscillation_details(u, cyl, subsample)[0]


def improvement_experiment(u: GridFunction, delta=0.1, theta_target=0.05, gamma=None, q=2.0):
    """Compare the oscillation over ``Q_delta`` with the one over ``Q_1``.

    ``theta_observed = 1 - osc(Q_delta) / osc(Q_1)``; with ``0 <= u <= 1`` on
    ``Q_1`` and unit oscillation this is ``1 - osc(Q_delta)``.
    """
    if not 0 < delta < 1:
        raise InvalidInputError("delta must lie in (0, 1)")
    gamma = 1.0 / q if gamma is None else gamma
    big = Cylinder(u.frame, u.h, gamma, 1.0)
    small = Cylinder(u.frame, u.h, gamma, delta)
    o1, n1 = oscillation_details(u, big)
    od, nd = oscillation_details(u, small)
    theta = 1.0 if o1 == 0 else 1.0 - od / o1
    return OscillationReport(u.h, gamma, [1.0, delta], [o1, od], [n1, nd],
                             theta_observed=theta,
                             meta={"theta_target": theta_target, "meets_target": bool(theta >= theta_target)})


def holder_alpha_from_theta(theta, delta):
    """``alpha = log(1 - theta) / log(delta)``, the rate implied by one contraction step."""
    if not 0 < theta < 1:
        return float("inf") if theta >= 1 else float("nan")
    return float(np.log(1.0 - theta) / np.log(delta))


def oscillation_iteration(u: GridFunction, levels=4, delta=0.5, alpha=0.0, q=2.0, check_rescale=True):
    """Oscillation over ``Q_{delta^k}`` for ``k = 0..levels``.

    The decay rate comes from least squares on ``log osc_k`` against ``k``:
    ``alpha_fit = slope / log(delta)``. When ``check_rescale`` is set, each
    level is also measured as ``delta**(k alpha) osc(Q_1)`` of the rescaled
    function and the largest relative mismatch is reported.
    """
    if levels > 6:
        raise InvalidInputError("at most six levels are resolvable")
    qc = conjugate_exponent(q)
    gamma = 1.0 / q + alpha / qc
    radii, osc, nodes = [], [], []
    mismatch = 0.0
    exhausted = False
    current = u
    for k in range(levels + 1):
        r = delta ** k
        try:
            o, n = oscillation_details(u, Cylinder(u.frame, u.h, gamma, r))
        except TooCoarseError:
            exhausted = True
            break
        radii.append(r)
        osc.append(o)
        nodes.append(n)
        if check_rescale and k > 0:
            try:
                current = rescale_grid_function(current, ScaleParams(q, alpha, delta))
                o_r, _ = oscillation_details(current, Cylinder(u.frame, current.h, gamma, 1.0))
                if o > 0:
                    mismatch = max(mismatch, abs(r ** alpha * o_r - o) / o)
            except Exception as exc:  # report the identity as unchecked at this level
                logger.debug("rescaled oscillation skipped at level %d: %s", k, exc)
                check_rescale = False
    report = OscillationReport(u.h, gamma, radii, osc, nodes, exhausted=exhausted,
                               meta={"delta": delta, "alpha_spec": alpha, "levels_requested": levels,
                                     "rescale_mismatch": mismatch})
    o = np.asarray(osc)
    if o.size and np.all(o == 0):
        report.alpha_fit = float("inf")
    elif o.size >= 2 and np.all(o > 0):
        slope = np.polyfit(np.arange(o.size), np.log(o), 1)[0]
        report.alpha_fit = float(slope / np.log(delta))
    if len(osc) >= 2:
        report.theta_observed = 1.0 - osc[1] / osc[0] if osc[0] > 0 else 1.0
    return report


@dataclass
class HolderFit:
    betas: np.ndarray
    intervals: np.ndarray
    predicted: np.ndarray
    alpha: float
    q: float
    ranges: list
    warnings: list = field(default_factory=list)

    @property
    def ratios(self):
        return self.betas[1:] / self.betas[0]

    @property
    def predicted_ratios(self):
        return self.predicted[1:] / self.predicted[0]

    def to_dict(self):
        return {"betas": self.betas.tolist(), "intervals": self.intervals.tolist(),
                "predicted": self.predicted.tolist(), "alpha": self.alpha, "q": self.q,
                "ranges": [list(map(float, r)) for r in self.ranges], "warnings": list(self.warnings)}


def alpha_from_beta0(beta0, q):
    """Invert ``beta0 = alpha / (alpha/q' + 1/q)``."""
    qc = conjugate_exponent(q)
    if not 0 < beta0 < qc:
        raise InvalidInputError(f"beta0 = {beta0} has no admissible alpha")
    return (beta0 / q) / (1.0 - beta0 / qc)


def holder_fit(u: GridFunction, frame=None, q=2.0, base=(0.0, None), n_scales=24,
               scale_range=None, directions=4):
    """Per-stratum exponents of ``|u(t, x + d v) - u(t, x)|`` against ``d``.

    Displacements ``v`` are unit vectors of a single stratum at equal times,
    where the flow correction is the identity. ``d`` is swept geometrically
    over ``[4 cell, extent/8]`` for grid data, or over ``scale_range`` when
    given. Returns a :class:`HolderFit` with 95% intervals from the
    regression standard error.
    """
    frame = u.frame if frame is None else frame
    t0, x0 = base
    x0 = np.zeros(frame.N) if x0 is None else np.asarray(x0, dtype=float)
    betas, intervals, ranges, notes = [], [], [], []
    rng = np.random.default_rng(0)
    for j in range(frame.kappa + 1):
        cols = frame.Q[:, frame.offsets[j]:frame.offsets[j] + frame.n[j]]
        if scale_range is not None:
            lo, hi = scale_range
        else:
            axes = slice(frame.offsets[j], frame.offsets[j] + frame.n[j])
            cell = float(np.max(u.grid.steps[axes]))
            extent = float(np.min(np.asarray(u.grid.highs)[axes] - np.asarray(u.grid.lows)[axes]))
            lo, hi = 4.0 * cell, extent / 8.0
        if not hi > lo:
            raise TooCoarseError(f"no resolvable displacement range in stratum {j}")
        if np.log10(hi / lo) < 1.5:
            notes.append(f"stratum {j}: displacement range spans {np.log10(hi / lo):.2f} decades (< 1.5)")
        ranges.append((lo, hi))
        d = np.geomspace(lo, hi, n_scales)
        if cols.shape[1] == 1:
            V = np.array([[1.0], [-1.0]])
        else:
            V = rng.normal(size=(directions, cols.shape[1]))
            V = np.vstack([V, -V])
            V /= np.linalg.norm(V, axis=1, keepdims=True)
        dirs = V @ cols.T
        ref = float(u(np.array([t0]), x0[None, :])[0])
        pts = (x0[None, None, :] + d[:, None, None] * dirs[None, :, :]).reshape(-1, frame.N)
        vals = u(np.full(pts.shape[0], t0), pts).reshape(d.size, -1)
        inc = np.mean(np.abs(vals - ref), axis=1)
        keep = inc > 0
        if keep.sum() < 3:
            betas.append(np.inf)
            intervals.append((np.inf, np.inf))
            notes.append(f"stratum {j}: increments vanish")
            continue
        res = stats.linregress(np.log(d[keep]), np.log(inc[keep]))
        half = stats.t.ppf(0.975, keep.sum() - 2) * res.stderr
        betas.append(res.slope)
        intervals.append((res.slope - half, res.slope + half))
    betas = np.asarray(betas)
    try:
        alpha = alpha_from_beta0(min(betas[0], conjugate_exponent(q) * (1 - 1e-12)), q)
    except InvalidInputError:
        alpha = float("nan")
    predicted = modulus_exponents(frame, q, alpha) if np.isfinite(alpha) else np.full(frame.kappa + 1, np.nan)
    if np.any(np.isfinite(betas) & (betas >= 1 - 1e-3)):
        notes.append("some exponents reach 1: Lipschitz saturation")
    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=2)
    return HolderFit(betas, np.asarray(intervals), predicted, float(alpha), q, ranges, notes)


def modulus_function(frame, q, alpha, h=0.0):
    """``(t, X) -> omega_alpha(t, x)`` vectorised, for synthetic data."""
    expo = modulus_exponents(frame, q, alpha)

    def omega(t, X):
        X = np.atleast_2d(X)
        out = np.abs(np.asarray(t, dtype=float)) ** alpha
        for Pj, e in zip(frame.P, expo):
            out = out + np.linalg.norm(X @ Pj.T, axis=1) ** e
        return out

    return omega


class HolderExponentEstimator(BaseEstimator):
    """``fit(u)`` runs :func:`holder_fit`; ``alpha_`` and ``betas_`` hold the result."""

    def __init__(self, q=2.0, base_time=0.0, scale_range=None, n_scales=24):
        self.q = q
        self.base_time = base_time
        self.scale_range = scale_range
        self.n_scales = n_scales

    def fit(self, u, y=None):
        self.fit_ = holder_fit(u, q=self.q, base=(self.base_time, None),
                               n_scales=self.n_scales, scale_range=self.scale_range)
        self.betas_ = self.fit_.betas
        self.alpha_ = self.fit_.alpha
        return self

    def predict(self, j):
        check_is_fitted(self, "fit_")
        return self.fit_.predicted[np.asarray(j)]
