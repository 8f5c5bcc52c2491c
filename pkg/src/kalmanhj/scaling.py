"""Anisotropic dilations, the drift-twisted group law, cylinders and gauges."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ._validation import as_vector
from .errors import InternalConsistencyError, InvalidInputError
from .kalman_geometry import KalmanFrame, rescaled_drift


def conjugate_exponent(q):
    q = float(q)
    if not q > 1:
        raise InvalidInputError(f"exponent must exceed 1, got {q}")
    return q / (q - 1.0)


@dataclass(frozen=True)
class ScaleParams:
    """Exponents and scale of a dilation.

    ``q_conj`` and ``gamma`` are derived once at construction and then read
    everywhere else, so every module uses the same floating-point values.
    """

    q: float
    alpha: float = 0.0
    r: float = 1.0
    h: float = 0.0
    q_conj: float = field(init=False)
    gamma: float = field(init=False)

    def __post_init__(self):
        qc = conjugate_exponent(self.q)
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.h < 0:
            raise InvalidInputError("h must be non-negative")
        object.__setattr__(self, "q_conj", qc)
        object.__setattr__(self, "gamma", 1.0 / self.q + self.alpha / qc)


@dataclass(frozen=True, eq=False)
class SpaceTimePoint:
    t: float
    x: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise InvalidInputError("time must be finite")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "x", as_vector(self.x))

    def allclose(self, other, atol=1e-10):
        return abs(self.t - other.t) <= atol and np.allclose(self.x, other.x, rtol=0, atol=atol)

    def to_dict(self):
        return {"t": self.t, "x": self.x.tolist()}


class Membership(enum.Enum):
    INSIDE = "inside"
    BOUNDARY = "boundary"
    OUTSIDE = "outside"


def scale_matrix_S(frame: KalmanFrame, r):
    return frame.S(r)


def dilation_spacetime(params: ScaleParams, point: SpaceTimePoint, frame: KalmanFrame):
    """``(t, x) -> (r t, r**gamma S(r) x)``."""
    r = params.r
    if not r > 0:
        raise InvalidInputError("dilation scale must be positive")
    return SpaceTimePoint(r * point.t, r ** params.gamma * (frame.S(r) @ point.x))


def dilation_determinant(frame, gamma, r):
    return float(r) ** (frame.N * gamma + 1 + frame.homogeneous_dimension)


def _flow(frame, h, t):
    return expm(t * rescaled_drift(frame, None, h))


def group_op(frame, h, lhs: SpaceTimePoint, rhs: SpaceTimePoint):
    """``(tau, zeta) * (t, x) = (tau + t, x + exp(t A_h) zeta)``."""
    return SpaceTimePoint(lhs.t + rhs.t, rhs.x + _flow(frame, h, rhs.t) @ lhs.x)


def group_inverse(frame, h, point: SpaceTimePoint):
    return SpaceTimePoint(-point.t, -(_flow(frame, h, -point.t) @ point.x))


def left_translation(frame, h, base: SpaceTimePoint):
    """The map ``p -> base * p``."""
    return lambda p: group_op(frame, h, base, p)


@dataclass(frozen=True, eq=False)
class Cylinder:
    """``{-r <= t <= 0, |S(r)^{-1} exp(-t A_h) x| < r**gamma}``."""

    frame: KalmanFrame
    h: float
    gamma: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise InvalidInputError("cylinder radius must be positive")
        if self.h < 0:
            raise InvalidInputError("h must be non-negative")

    def normalized_radius(self, t, X):
        """``|S(r)^{-1} exp(-t A_h) x| / r**gamma`` for arrays of points.

        ``t`` has shape (m,) and ``X`` shape (m, N). Points with equal times
        share one matrix exponential.
        """
        t = np.asarray(t, dtype=float).reshape(-1)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Ah = rescaled_drift(self.frame, None, self.h)
        Sinv = self.frame.S_inv(self.r)
        out = np.empty(t.shape[0])
        uniq, inv = np.unique(t, return_inverse=True)
        for k, tk in enumerate(uniq):
            sel = inv == k
            M = Sinv @ expm(-tk * Ah)
            out[sel] = np.linalg.norm(X[sel] @ M.T, axis=1)
        return out / self.r ** self.gamma

    def contains_many(self, t, X, closed=False):
        t = np.asarray(t, dtype=float).reshape(-1)
        rad = self.normalized_radius(t, X)
        in_time = (t >= -self.r) & (t <= 0.0)
        return in_time & ((rad <= 1.0) if closed else (rad < 1.0))

    def contains(self, point: SpaceTimePoint, closed=False):
        return bool(self.contains_many([point.t], point.x[None, :], closed=closed)[0])

    def classify(self, point: SpaceTimePoint, tol=1e-12):
        t = point.t
        rad = self.normalized_radius([t], point.x[None, :])[0]
        if t < -self.r - tol or t > tol or rad > 1.0 + tol:
            return Membership.OUTSIDE
        if abs(t) <= tol or abs(t + self.r) <= tol or abs(rad - 1.0) <= tol:
            return Membership.BOUNDARY
        return Membership.INSIDE

    def to_dict(self):
        return {"h": self.h, "gamma": self.gamma, "r": self.r}


def cylinder_contains(cyl: Cylinder, point: SpaceTimePoint):
    return cyl.contains(point)


def _scaled_norm(v):
    """Euclidean norm that does not underflow for tiny entries."""
    m = float(np.max(np.abs(v)))
    return 0.0 if m == 0 else m * float(np.linalg.norm(v / m))


def gauge_rho(frame, h, gamma, point: SpaceTimePoint, iterations=60):
    """Smallest radius whose closed cylinder contains ``point``.

    For fixed ``(t, x)`` let ``y = exp(-t A_h) x``. Membership at radius
    ``rho`` reads ``rho >= |t|`` and ``sum_j |P_j y|**2 rho**(-2(gamma+j)) <= 1``,
    which is monotone in ``rho``. The bracket

        max_j |P_j y|**(1/(gamma+j))  <=  rho  <=  max_j (sqrt(kappa+1) |P_j y|)**(1/(gamma+j))

    follows from bounding the sum by its largest term.
    """
    if point.t > 0:
        raise InvalidInputError("gauge is defined for t <= 0")
    t = abs(point.t)
    y = _flow(frame, h, -point.t) @ point.x
    norms = np.array([_scaled_norm(Pj @ y) for Pj in frame.P])
    expo = 1.0 / (gamma + np.arange(frame.kappa + 1))
    live = norms > 0
    if not np.any(live):
        return t
    logn = np.log(norms[live])
    weights = 1.0 / expo[live]

    def inside(rho):
        if rho < t:
            return False
        if rho <= 0:
            return False
        # sum_j (|P_j y| / rho**(gamma+j))**2 <= 1, evaluated in logs to avoid 0 * inf
        with np.errstate(over="ignore"):
            return float(np.sum(np.exp(2.0 * (logn - weights * np.log(rho))))) <= 1.0

    lo = max(t, float(np.max(np.exp(logn * expo[live]))))
    if inside(lo):
        return lo
    hi = max(t, float(np.max(np.exp((logn + 0.5 * np.log(frame.kappa + 1)) * expo[live]))))
    for _ in range(64):  # guards against rounding at the upper end
        if inside(hi):
            break
        hi *= 1.0 + 1e-12
    else:
        raise InternalConsistencyError("gauge bracket does not contain the point")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            hi = mid
        else:
            lo = mid
    return hi


def gauge_reference(frame, gamma, point: SpaceTimePoint):
    """``|t| + sum_j |P_j x|**(1/(gamma+j))``, the comparison quantity for the gauge."""
    return abs(point.t) + sum(np.linalg.norm(Pj @ point.x) ** (1.0 / (gamma + j))
                              for j, Pj in enumerate(frame.P))


def modulus_exponents(frame, q, alpha, q_conj=None):
    qc = conjugate_exponent(q) if q_conj is None else q_conj
    return np.array([alpha / (alpha / qc + 1.0 / q + j) for j in range(frame.kappa + 1)])


def modulus_omega(frame, q, alpha, point: SpaceTimePoint, q_conj=None):
    """``|t|**alpha + sum_j |P_j x|**(alpha / (alpha/q' + 1/q + j))``."""
    if not 0 < alpha <= 1:
        raise InvalidInputError("alpha must lie in (0, 1]")
    expo = modulus_exponents(frame, q, alpha, q_conj)
    return abs(point.t) ** alpha + sum(np.linalg.norm(Pj @ point.x) ** e
                                       for Pj, e in zip(frame.P, expo))
