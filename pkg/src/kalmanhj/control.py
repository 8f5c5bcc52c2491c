"""Minimum-energy steering of ``eta' = A_h eta + P0 beta`` in ``L^{q'}``.

The solver works on the convex dual. With ``K(tau) = P0^T exp((t - tau) A_h^T)``
the optimal control is ``beta = |K^T p|^{q-2} K^T p`` where the multiplier
``p`` solves ``F(p) = xi``, and ``F`` is the gradient of the concave dual
objective ``<p, xi> - (1/q) int |K^T p|^q``. By default the problem is first
mapped to the unit time interval through the anisotropic scaling, which keeps
small horizons well conditioned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_vector
from .errors import IllConditionedHorizonError, InvalidInputError, NoConvergenceError
from .kalman_geometry import build_frame, rescaled_drift
from .scaling import conjugate_exponent

logger = logging.getLogger(__name__)

MIN_Q_CONJ = 1.1
GAUSS_NODES = 8
DEFAULT_SUBINTERVALS = 256
MAX_NEWTON = 200


@dataclass(frozen=True, eq=False)
class ControlProblemSpec:
    frame: object
    h: float = 0.0
    q_conj: float = 2.0
    s: float = 0.0
    t: float = 1.0
    y: np.ndarray = None
    x: np.ndarray = None

    def __post_init__(self):
        N = self.frame.N
        if not self.s < self.t:
            raise InvalidInputError("interval must satisfy s < t")
        if not self.q_conj > 1:
            raise InvalidInputError("q_conj must exceed 1")
        if self.h < 0:
            raise InvalidInputError("h must be non-negative")
        y = np.zeros(N) if self.y is None else as_vector(self.y, N, "y")
        x = np.zeros(N) if self.x is None else as_vector(self.x, N, "x")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def q(self):
        return conjugate_exponent(self.q_conj)

    @property
    def horizon(self):
        return self.t - self.s

    @property
    def drift(self):
        return rescaled_drift(self.frame, None, self.h)

    @property
    def xi(self):
        """Displacement from the free flow: ``x - exp((t-s) A_h) y``."""
        return self.x - expm(self.horizon * self.drift) @ self.y


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    cost: float

    @property
    def steps(self):
        return np.diff(self.times)


@dataclass(frozen=True, eq=False)
class CostValue:
    J: float
    p: np.ndarray
    residual: float
    iterations: int = 0
    duality_gap: float = 0.0
    method: str = "dual-newton"
    info: dict = field(default_factory=dict)


def composite_gauss(T, M=DEFAULT_SUBINTERVALS, order=GAUSS_NODES):
    """Nodes and weights of composite Gauss-Legendre on ``[0, T]``."""
    x, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(0.0, T, M + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def control_basis(frame):
    """Orthonormal basis of ``Im P0`` (first block of the adapted basis)."""
    return frame.block(0)


def _kernel(Ah, B0, nodes):
    """``exp(sigma A_h) B0`` at every node, shape (K, N, n0)."""
    return expm(nodes[:, None, None] * Ah[None, :, :]) @ B0


def _gramian(G, w):
    return np.einsum("k,kan,kbn->ab", w, G, G)


def gramian_cost_q2(spec: ControlProblemSpec):
    """Closed form ``J = xi^T W^{-1} xi / 2`` for quadratic energy.

    The Gramian ``W = int_0^T exp(s A_h) P0 P0^T exp(s A_h^T) ds`` is read off
    the block exponential of ``[[-A_h, P0 P0^T], [0, A_h^T]]``.
    """
    if abs(spec.q_conj - 2.0) > 1e-12:
        raise InvalidInputError("the Gramian formula requires q_conj = 2")
    Ah, N, T = spec.drift, spec.frame.N, spec.horizon
    P0 = spec.frame.P[0]
    big = np.zeros((2 * N, 2 * N))
    big[:N, :N] = -Ah
    big[:N, N:] = P0 @ P0.T
    big[N:, N:] = Ah.T
    E = expm(T * big)
    W = E[N:, N:].T @ E[:N, N:]
    W = 0.5 * (W + W.T)
    cond = np.linalg.cond(W)
    if not np.isfinite(cond) or cond > 1e14:
        raise IllConditionedHorizonError(f"Gramian condition number {cond:.3e} exceeds 1e14")
    xi = spec.xi
    p = np.linalg.solve(W, xi)
    return CostValue(J=0.5 * float(xi @ p), p=p, residual=float(np.linalg.norm(W @ p - xi)),
                     method="gramian", info={"gramian": W, "condition": cond})


class _DualProblem:
    """Discretised dual on ``[0, T]`` with kernel ``exp(sigma A) B0``."""

    def __init__(self, Ah, B0, T, xi, q, M):
        self.nodes, self.w = composite_gauss(T, M)
        self.G = _kernel(Ah, B0, self.nodes)
        self.xi = xi
        self.q = q

    def z(self, p):
        return np.einsum("kan,a->kn", self.G, p)

    def controls(self, z):
        nz = np.linalg.norm(z, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(nz > 0, nz ** (self.q - 2.0), 0.0)
        return z * scale[:, None]

    def F(self, p):
        return np.einsum("k,kan,kn->a", self.w, self.G, self.controls(self.z(p)))

    def objective(self, p):
        nz = np.linalg.norm(self.z(p), axis=1)
        return float(p @ self.xi - np.sum(self.w * nz ** self.q) / self.q)

    def jacobian(self, p):
        z = self.z(p)
        nz = np.linalg.norm(z, axis=1)
        floor = 1e-12 * max(nz.max(), 1e-300)
        nz = np.maximum(nz, floor)
        q = self.q
        iso = nz ** (q - 2.0)
        rank1 = (q - 2.0) * nz ** (q - 4.0)
        GG = np.einsum("k,kan,kbn->ab", self.w * iso, self.G, self.G)
        Gz = np.einsum("kan,kn->ka", self.G, z)
        return GG + np.einsum("k,ka,kb->ab", self.w * rank1, Gz, Gz)

    def primal_cost(self, p):
        nz = np.linalg.norm(self.z(p), axis=1)
        return float(np.sum(self.w * nz ** self.q)) * (1.0 - 1.0 / self.q)


def _newton(prob: _DualProblem, tol, max_iter=MAX_NEWTON):
    xi = prob.xi
    W = _gramian(prob.G, prob.w)
    p = np.linalg.solve(W, xi)
    Fp = prob.F(p)
    num, den = float(p @ xi), float(p @ Fp)
    if prob.q != 2.0 and num > 0 and den > 0:
        # F is homogeneous of degree q - 1; match <p, F(p)> = <p, xi>.
        p = p * (num / den) ** (1.0 / (prob.q - 2.0))
    scale = max(np.linalg.norm(xi), 1e-300)
    for it in range(1, max_iter + 1):
        r = xi - prob.F(p)
        if np.linalg.norm(r) <= tol * scale:
            return p, it - 1, True
        d = np.linalg.solve(prob.jacobian(p), r)
        phi0, slope = prob.objective(p), float(r @ d)
        step = 1.0
        while step > 1e-12:
            if prob.objective(p + step * d) >= phi0 + 1e-4 * step * slope:
                break
            step *= 0.5
        p = p + step * d
    r = xi - prob.F(p)
    return p, max_iter, bool(np.linalg.norm(r) <= tol * scale)


def _primal_descent(prob: _DualProblem, tol, max_iter=20000):
    """Accelerated projected gradient on node values of the control.

    Feasible set: ``sum_k w_k G_k b_k = xi``; the projection uses the
    weighted inner product in which the adjoint of that map is ``G_k^T``.
    """
    G, w, xi, qc = prob.G, prob.w, prob.xi, conjugate_exponent(prob.q)
    W = _gramian(G, w)
    Winv = np.linalg.inv(W)

    def project(B):
        res = np.einsum("k,kan,kn->a", w, G, B) - xi
        return B - np.einsum("kan,a->kn", G, Winv @ res)

    def cost(B):
        return float(np.sum(w * np.linalg.norm(B, axis=1) ** qc)) / qc

    def grad(B):
        nb = np.linalg.norm(B, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(nb > 0, nb ** (qc - 2.0), 0.0)
        return B * s[:, None]

    B = project(np.zeros_like(G[:, 0, :]))
    Y, Bprev, tk, lr = B.copy(), B.copy(), 1.0, 1.0
    best = cost(B)
    for it in range(1, max_iter + 1):
        fy, gy = cost(Y), grad(Y)
        while True:
            Bn = project(Y - lr * gy)
            diff = Bn - Y
            if cost(Bn) <= fy + np.sum(w[:, None] * gy * diff) + np.sum(w[:, None] * diff ** 2) / (2 * lr) or lr < 1e-14:
                break
            lr *= 0.5
        tn = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        Y = Bn + ((tk - 1) / tn) * (Bn - Bprev)
        Bprev, tk = Bn, tn
        c = cost(Bn)
        if abs(best - c) <= tol * max(c, 1e-300) and it > 10:
            best = c
            break
        best = min(best, c)
    return Bprev, best, it


def _solve(Ah, B0, T, xi, q, tol, M, method="newton"):
    prob = _DualProblem(Ah, B0, T, xi, q, M)
    if method == "newton":
        p, iters, ok = _newton(prob, tol)
        if ok:
            gap = float(p @ (prob.F(p) - xi))
            J = prob.primal_cost(p)
            return prob, CostValue(J=J, p=p, residual=float(np.linalg.norm(xi - prob.F(p))),
                                   iterations=iters, duality_gap=abs(gap))
        logger.warning("dual Newton stagnated after %d iterations; switching to primal descent", iters)
    B, J, iters = _primal_descent(prob, tol)
    res = float(np.linalg.norm(np.einsum("k,kan,kn->a", prob.w, prob.G, B) - xi))
    if not np.isfinite(J) or res > max(tol, 1e-8) * max(np.linalg.norm(xi), 1.0):
        raise NoConvergenceError("minimum-energy solver failed to converge",
                                 best={"J": J, "residual": res})
    # Recover a multiplier from the first-order condition in least squares.
    Z = B * (np.linalg.norm(B, axis=1) ** (conjugate_exponent(q) - 2.0))[:, None]
    p, *_ = np.linalg.lstsq(prob.G.transpose(0, 2, 1).reshape(-1, prob.G.shape[1]), Z.ravel(), rcond=None)
    return prob, CostValue(J=J, p=p, residual=res, iterations=iters, method="primal-descent",
                           info={"node_controls": B})


def _trajectory(spec, control_fn, n_steps):
    """Piecewise-constant controls at cell midpoints, states by exact stepping."""
    Ah, N = spec.drift, spec.frame.N
    times = np.linspace(spec.s, spec.t, n_steps + 1)
    dt = times[1] - times[0]
    mids = 0.5 * (times[:-1] + times[1:])
    controls = control_fn(mids)
    big = np.zeros((2 * N, 2 * N))
    big[:N, :N] = Ah
    big[:N, N:] = np.eye(N)
    E = expm(dt * big)
    step, gamma = E[:N, :N], E[:N, N:]
    drive = controls @ gamma.T
    states = np.empty((n_steps + 1, N))
    states[0] = spec.y
    for k in range(n_steps):
        states[k + 1] = step @ states[k] + drive[k]
    cost = float(np.sum(np.linalg.norm(controls, axis=1) ** spec.q_conj) * dt / spec.q_conj)
    return Trajectory(times=times, states=states, controls=controls, cost=cost)


def min_energy_cost(spec: ControlProblemSpec, tol=1e-8, rescale=True, subintervals=DEFAULT_SUBINTERVALS,
                    trajectory_steps=None, method="newton", max_trajectory_steps=2 ** 15):
    """Optimal ``(1/q') int |beta|^{q'}`` steering ``y`` at ``s`` to ``x`` at ``t``.

    Parameters
    ----------
    spec : ControlProblemSpec
    tol : float
        Relative tolerance on the endpoint residual of the dual equation.
    rescale : bool
        Solve the equivalent unit-interval problem (recommended).
    trajectory_steps : int, optional
        Number of trajectory cells. When omitted, cells are doubled from 256
        until the endpoint error is below ``tol * (1 + |x|)``.
    method : {"newton", "primal"}

    Returns
    -------
    (CostValue, Trajectory)
    """
    if spec.q_conj < MIN_Q_CONJ:
        raise InvalidInputError(f"q_conj below {MIN_Q_CONJ} is not supported")
    frame, q = spec.frame, spec.q
    B0 = control_basis(frame)
    T, xi = spec.horizon, spec.xi
    if not np.any(xi):
        cv = CostValue(J=0.0, p=np.zeros(frame.N), residual=0.0)
        n = trajectory_steps or 256
        return cv, _trajectory(spec, lambda m: np.zeros((m.size, frame.N)), n)
    solver = "newton" if method == "newton" else "primal"
    if rescale:
        # Unit interval: xi^ = S(T)^{-1} xi / T, drift A_{hT}, multiplier p = S(T)^{-1} p^.
        Ah_run, T_run = rescaled_drift(frame, None, spec.h * T), 1.0
        xi_run = frame.S_inv(T) @ xi / T
    else:
        Ah_run, T_run, xi_run = spec.drift, T, xi
    prob, unit = _solve(Ah_run, B0, T_run, xi_run, q, tol, subintervals, solver)
    p_run = unit.p
    if rescale:
        cv = CostValue(J=T * unit.J, p=frame.S_inv(T) @ p_run,
                       residual=T * float(np.linalg.norm(frame.S(T) @ (xi_run - prob.F(p_run)))),
                       iterations=unit.iterations, duality_gap=T * unit.duality_gap,
                       method=unit.method, info=unit.info)
    else:
        cv = unit

    def control_fn(times):
        sig = (spec.t - times) * (T_run / T)
        z = np.einsum("kab,a->kb", expm(sig[:, None, None] * Ah_run[None]) @ B0, p_run)
        return prob.controls(z) @ B0.T

    target = tol * (1.0 + np.linalg.norm(spec.x))
    n = trajectory_steps or 256
    while True:
        traj = _trajectory(spec, control_fn, n)
        err = float(np.linalg.norm(traj.states[-1] - spec.x))
        if trajectory_steps is not None or err <= target or 2 * n > max_trajectory_steps:
            break
        n *= 2
    cv.info["trajectory_endpoint_error"] = err
    return cv, traj


def reduced_cost(frame, h, xi, tol=1e-8, q_conj=2.0, **kwargs):
    """``J~_h(t; xi)`` is this with horizon 1; see :func:`jhat_reduced`."""
    kwargs.setdefault("trajectory_steps", 8)
    return min_energy_cost(ControlProblemSpec(frame, h, q_conj, 0.0, 1.0, None, xi), tol, **kwargs)[0].J


def jhat_reduced(frame, h, xi, tol=1e-8, q_conj=2.0, **kwargs):
    """Unit-interval cost ``J^_h(xi)``: steer ``0`` to ``xi`` in time 1 with drift ``A_h``."""
    xi = as_vector(xi, frame.N, "xi")
    if not np.any(xi):
        return 0.0
    return reduced_cost(frame, h, xi, tol, q_conj, **kwargs)


def horizon_cost(frame, h, t, xi, q_conj=2.0, tol=1e-8, **kwargs):
    """``J~_h(t; xi)``: cost of steering ``0`` to ``xi`` in time ``t``."""
    spec = ControlProblemSpec(frame, h, q_conj, 0.0, float(t), None, xi)
    kwargs.setdefault("trajectory_steps", 8)
    return min_energy_cost(spec, tol, **kwargs)[0].J


def small_time_scale(frame, q, t, xi, q_conj=None):
    """``t**(-q'/q) |S(t)^{-1} xi|**q'``."""
    qc = conjugate_exponent(q) if q_conj is None else q_conj
    return t ** (-qc / q) * np.linalg.norm(frame.S_inv(t) @ xi) ** qc


@dataclass
class CostBoundsReport:
    rows: list
    min_ratio: float
    max_ratio: float
    C_stability: float

    @property
    def spread(self):
        return self.max_ratio / self.min_ratio if self.rows else 1.0

    @property
    def ok(self):
        return (not self.rows) or self.spread <= self.C_stability


def scaled_cost_bounds_report(frame, q, h_list, t_list, xi_samples, C_stability=1e3, tol=1e-8):
    """Ratio of ``J~_h(t; xi)`` to its predicted small-time size for every sample."""
    qc = conjugate_exponent(q)
    rows = []
    for h in h_list:
        for t in t_list:
            for k, xi in enumerate(xi_samples):
                xi = np.asarray(xi, dtype=float)
                J = horizon_cost(frame, h, t, xi, qc, tol)
                den = small_time_scale(frame, q, t, xi, qc)
                rows.append({"h": float(h), "t": float(t), "sample": k, "J": J,
                             "scale": den, "ratio": J / den})
    ratios = [r["ratio"] for r in rows]
    return CostBoundsReport(rows=rows, min_ratio=min(ratios, default=np.nan),
                            max_ratio=max(ratios, default=np.nan), C_stability=C_stability)


def extent_bound_check(spec: ControlProblemSpec, trajectory: Trajectory):
    """Smallest constant in the two trajectory-extent bounds.

    Both ``|S(T)^{-1}(exp((t-tau) A_h) eta(tau) - exp(T A_h) y)|`` and
    ``|S(T)^{-1}(x - exp((t-tau) A_h) eta(tau))|``, scaled by ``T**(-1/q)``,
    are compared with ``||beta||_{L^q'}``.
    """
    frame, Ah, T = spec.frame, spec.drift, spec.horizon
    Sinv = frame.S_inv(T)
    to_go = spec.t - trajectory.times
    flows = expm(to_go[:, None, None] * Ah[None])
    pushed = np.einsum("kab,kb->ka", flows, trajectory.states)
    free = expm(T * Ah) @ spec.y
    lhs_start = np.linalg.norm((pushed - free) @ Sinv.T, axis=1) * T ** (-1.0 / spec.q)
    lhs_end = np.linalg.norm((spec.x - pushed) @ Sinv.T, axis=1) * T ** (-1.0 / spec.q)
    norm_beta = float(np.sum(np.linalg.norm(trajectory.controls, axis=1) ** spec.q_conj
                             * trajectory.steps) ** (1.0 / spec.q_conj))
    worst = max(lhs_start.max(), lhs_end.max())
    C = worst / norm_beta if norm_beta > 0 else (0.0 if worst == 0 else np.inf)
    return {"C_q": float(C), "max_lhs_start": float(lhs_start.max()),
            "max_lhs_end": float(lhs_end.max()), "control_norm": norm_beta}


def unit_sphere_samples(N, count, rng):
    v = rng.normal(size=(count, N))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def norm_equivalence_constant(frame, h, q_conj, samples, tol=1e-8):
    """``C`` with ``|xi|^{q'}/C <= J^_h(xi) <= C |xi|^{q'}`` on the samples."""
    ratios = np.array([jhat_reduced(frame, h, xi, tol, q_conj) / np.linalg.norm(xi) ** q_conj
                       for xi in samples])
    return float(max(ratios.max(), 1.0 / ratios.min())), ratios


def principal_right_inverse_norm(frame, q_conj, directions=256, subintervals=64):
    """``L^{q'}`` norm of the minimal-``L^2`` right inverse of ``zeta -> int exp(tau A0) P0 zeta``."""
    nodes, w = composite_gauss(1.0, subintervals)
    G = _kernel(frame.A0, frame.P[0], nodes)
    Winv = np.linalg.pinv(_gramian(G, w))
    angles = np.random.default_rng(0).normal(size=(directions, frame.N))
    angles = np.vstack([angles, np.linalg.eigh(Winv)[1].T])
    angles /= np.linalg.norm(angles, axis=1, keepdims=True)
    best = 0.0
    for xi in angles:
        zeta = np.einsum("kab,a->kb", G, Winv @ xi)
        val = np.sum(w * np.linalg.norm(zeta, axis=1) ** q_conj) ** (1.0 / q_conj)
        best = max(best, val)
    return float(best)


def h_star_estimates(frame, q_conj=2.0, samples=None, k_range=range(-10, 5), tol=1e-8, factor=2.0):
    """Largest dyadic ``h`` keeping the norm-equivalence constant within ``factor`` of ``h = 0``.

    The log-formula value built from ``||A||`` and the right-inverse norm is
    returned alongside for comparison.
    """
    if samples is None:
        samples = unit_sphere_samples(frame.N, 16, np.random.default_rng(0))
    C0, _ = norm_equivalence_constant(frame, 0.0, q_conj, samples, tol)
    sweep, h_emp = [], 0.0
    for k in k_range:
        h = 2.0 ** k
        try:
            C, _ = norm_equivalence_constant(frame, h, q_conj, samples, tol)
        except (NoConvergenceError, IllConditionedHorizonError):
            C = np.inf
        sweep.append((h, C))
        if C <= factor * C0:
            h_emp = h
        else:
            break
    normA = np.linalg.norm(frame.A, 2)
    H = principal_right_inverse_norm(frame, q_conj)
    h_formula = np.inf if normA == 0 else float(np.log1p(1.0 / (2 * H * np.exp(normA))) / normA)
    return {"h_star_empirical": h_emp, "h_star_formula": h_formula, "C0": C0,
            "sweep": sweep, "right_inverse_norm": H}


class MinEnergyCost(BaseEstimator):
    """Estimator wrapper around :func:`min_energy_cost`.

    ``fit(A, P0)`` builds the frame; ``predict(X)`` takes rows ``[t, xi_1..xi_N]``
    and returns ``J~_h(t; xi)``.
    """

    def __init__(self, q_conj=2.0, h=0.0, tol=1e-8):
        self.q_conj = q_conj
        self.h = h
        self.tol = tol

    def fit(self, A, P0):
        self.frame_ = build_frame(A, P0)
        return self

    def predict(self, X):
        check_is_fitted(self, "frame_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.frame_.N + 1:
            raise InvalidInputError("rows must be [t, xi_1, ..., xi_N]")
        return np.array([horizon_cost(self.frame_, self.h, row[0], row[1:], self.q_conj, self.tol)
                         for row in X])
