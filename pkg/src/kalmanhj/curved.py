"""Curved trajectory families with fractional-power controls.

A family on ``[0, t]`` steers ``0`` to any target ``w`` using controls
``beta(sigma) = sum_i sigma**(alpha_i - 1) B_i w`` with values in ``E_0``.
The maps ``B_i`` come from a right inverse of the moment operator

    G b = sum_i int_0^1 (1 - tau)**(alpha_i - 1) exp(tau A0) b_i dtau,

corrected by the corresponding drift-remainder operator. Both moment
operators reduce to Beta integrals because ``exp(tau A0)`` is a polynomial in
``tau`` and the remainder is a power series in ``tau``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.special import beta as beta_fn
from scipy.special import gamma as gamma_fn

from .control import Trajectory
from .errors import HTooLargeError, InternalConsistencyError, InvalidExponentError, InvalidInputError
from .kalman_geometry import rescaled_drift
from .scaling import conjugate_exponent

PINV_RTOL = 1e-12
MIN_SINGULAR = 1e-8
GRADED_LEVELS = 40


def negated_frame(frame):
    """Same strata, drift ``-A``; used for families run backwards in time."""
    return dataclasses.replace(frame, A=-frame.A, A0=-frame.A0)


def default_alphas(frame, q, p, margin=0.02):
    """Evenly spaced exponents in ``(1/q + margin, min(1, (p - 1 - sum j n_j)/N) - margin)``."""
    lo = 1.0 / q + margin
    hi = min(1.0, (p - 1 - frame.homogeneous_dimension) / frame.N) - margin
    if not lo < hi:
        raise InvalidExponentError(f"empty exponent range ({lo:.4f}, {hi:.4f}) for p={p}, q={q}")
    k = frame.kappa + 1
    return tuple(np.linspace(lo, hi, k)) if k > 1 else (0.5 * (lo + hi),)


def _principal_moment(frame, alpha):
    """``int_0^1 (1-tau)**(alpha-1) exp(tau A0) dtau``."""
    out = np.zeros((frame.N, frame.N))
    power = np.eye(frame.N)
    for l in range(frame.kappa + 1):
        out += beta_fn(l + 1, alpha) / math.factorial(l) * power
        power = power @ frame.A0
    return out


def _remainder_moment(frame, h, alpha, tol=1e-17, max_terms=400):
    """``int_0^1 (1-tau)**(alpha-1) R_A(tau; h) P0 dtau``.

    Only the column stratum ``0`` survives the trailing ``P0``, leaving
    ``sum_a sum_{m>=1} h**m B(m+a+1, alpha)/(m+a)! P_a A**(m+a) P0``.
    """
    N, P, A = frame.N, frame.P, frame.A
    out = np.zeros((N, N))
    if h == 0.0:
        return out
    normA = np.linalg.norm(A, 2)
    powers = [P[0]]
    for m in range(1, max_terms):
        while len(powers) <= m + frame.kappa:
            powers.append(A @ powers[-1])
        bound = 0.0
        for a in range(frame.kappa + 1):
            l = m + a
            c = h ** m * beta_fn(l + 1, alpha) / math.factorial(l)
            out += c * (P[a] @ powers[l])
            bound = max(bound, abs(h) ** m * normA ** l / math.factorial(l))
        if bound < tol:
            return out
    raise InternalConsistencyError("remainder moment series did not converge")


def _graded_rule(s, levels=GRADED_LEVELS, order=8):
    """Gauss nodes on dyadic shells ``[s 2^-(k+1), s 2^-k]``, ``k < levels``."""
    x, w = np.polynomial.legendre.leggauss(order)
    hi = s * 0.5 ** np.arange(levels)
    lo = 0.5 * hi
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights, s * 0.5 ** levels


@dataclass(frozen=True, eq=False)
class CurvedFamily:
    """Linear family of controlled paths from ``0`` (time 0) to ``w`` (time ``t``)."""

    frame: object
    h: float
    t: float
    alphas: tuple
    B: np.ndarray          # (kappa+1, n0, N): E_0-coordinates of B_i w
    G: np.ndarray          # moment matrix, (N, (kappa+1) n0)
    H: np.ndarray          # right inverse of G
    HR_norm: float
    reversed: bool = False

    @property
    def basis0(self):
        return self.frame.block(0)

    def _moment_matrix(self, hs):
        B0 = self.basis0
        return np.hstack([(_principal_moment(self.frame, a) + _remainder_moment(self.frame, hs, a)) @ B0
                          for a in self.alphas])

    def coefficients(self, w):
        return np.einsum("inN,N->in", self.B, np.asarray(w, dtype=float))

    def control(self, sigma, w):
        """``sum_i sigma**(alpha_i - 1) B_i w`` as ambient vectors, shape (len(sigma), N)."""
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        c = self.coefficients(w) @ self.basis0.T              # (kappa+1, N)
        powers = sigma[:, None] ** (np.asarray(self.alphas)[None, :] - 1.0)
        return powers @ c

    def phi_matrix(self, s):
        """Closed form of ``w -> Phi(s, w)``: ``S(s) (G + R_{hs}) D_alpha(s) B``."""
        if s == 0:
            return np.zeros((self.frame.N, self.frame.N))
        M = self._moment_matrix(self.h * s)
        n0 = self.frame.n[0]
        D = np.repeat(np.asarray(self.alphas), n0)
        Bflat = self.B.reshape(-1, self.frame.N)
        return self.frame.S(s) @ M @ (s ** D[:, None] * Bflat)

    def phi(self, s, w):
        return self.phi_matrix(s) @ np.asarray(w, dtype=float)

    def phi_oracle(self, s, w):
        """``int_0^s exp((s - sigma) A_h) P0 beta(sigma) dsigma`` by graded quadrature."""
        Ah = rescaled_drift(self.frame, None, self.h)
        nodes, weights, eps = _graded_rule(s)
        flows = expm((s - nodes)[:, None, None] * Ah[None])
        body = np.einsum("k,kab,kb->a", weights, flows, self.control(nodes, w))
        # Innermost shell: exp((s - sigma) A_h) ~ exp(s A_h) and int_0^eps sigma**(a-1) = eps**a / a.
        c = self.coefficients(w) @ self.basis0.T
        tail = sum(eps ** a / a * c[i] for i, a in enumerate(self.alphas))
        return body + expm(s * Ah) @ tail

    def cost(self, w, q_conj):
        """``int_0^t |beta|**q'`` by graded quadrature with an analytic innermost shell.

        The shell keeps the leading power of ``|beta|**q'`` and its first-order
        cross terms, since the integrand decays only like ``sigma**((alpha_min - 1) q')``.
        """
        nodes, weights, eps = _graded_rule(self.t, levels=2 * GRADED_LEVELS)
        body = float(np.sum(weights * np.linalg.norm(self.control(nodes, w), axis=1) ** q_conj))
        c = self.coefficients(w) @ self.basis0.T
        i = int(np.argmin(self.alphas))
        a = self.alphas[i]
        lead = np.linalg.norm(c[i])
        if lead == 0:
            return body
        e = (a - 1.0) * q_conj + 1.0
        tail = lead ** q_conj * eps ** e / e
        for j, b in enumerate(self.alphas):
            if j != i:
                ej = (a - 1.0) * (q_conj - 1.0) + b
                tail += q_conj * lead ** (q_conj - 2.0) * (c[i] @ c[j]) * eps ** ej / ej
        return body + tail

    def inverse_jacobian_det(self, s):
        return 1.0 / abs(np.linalg.det(self.phi_matrix(s)))

    def gradient_norm(self, s):
        """``|S(t)^{-1} grad Phi^{-1}(s) S(s)|``."""
        inv = np.linalg.inv(self.phi_matrix(s))
        return float(np.linalg.norm(self.frame.S_inv(self.t) @ inv @ self.frame.S(s), 2))


def build_curved_family(frame, h, t, alphas, tol=1e-8, reversed=False):
    """Assemble ``B(t) = D_alpha(t)^{-1} (I + H R_{ht})^{-1} H S(t)^{-1}``.

    ``H`` is the minimal-norm right inverse of the principal moment matrix.
    Raises :class:`HTooLargeError` when ``||H R_{ht}|| > 1/2``.
    """
    alphas = tuple(float(a) for a in alphas)
    if len(alphas) != frame.kappa + 1:
        raise InvalidInputError(f"need {frame.kappa + 1} exponents, got {len(alphas)}")
    if not t > 0 or h < 0:
        raise InvalidInputError("need t > 0 and h >= 0")
    gaps = np.diff(sorted(alphas))
    if np.any(gaps < 1e-3) or min(alphas) <= 0 or max(alphas) >= 1:
        raise InvalidExponentError("exponents must be distinct (gap >= 1e-3) and lie in (0, 1)")
    B0 = frame.block(0)
    n0 = frame.n[0]
    G = np.hstack([_principal_moment(frame, a) @ B0 for a in alphas])
    sv = np.linalg.svd(G, compute_uv=False)
    smin = sv[frame.N - 1] if G.shape[1] >= frame.N else 0.0
    if smin <= MIN_SINGULAR:
        raise InternalConsistencyError(f"moment operator is not surjective (sigma_min={smin:.3e})")
    H = np.linalg.pinv(G, rcond=PINV_RTOL)
    R = np.hstack([_remainder_moment(frame, h * t, a) @ B0 for a in alphas])
    HR = H @ R
    HR_norm = float(np.linalg.norm(HR, 2))
    if HR_norm > 0.5:
        raise HTooLargeError(f"||H R|| = {HR_norm:.3f} > 1/2; reduce h*t")
    core = np.linalg.solve(np.eye(HR.shape[0]) + HR, H @ frame.S_inv(t))
    D = np.repeat(np.asarray(alphas), n0)
    Bflat = t ** (-D)[:, None] * core
    fam = CurvedFamily(frame=frame, h=float(h), t=float(t), alphas=alphas,
                       B=Bflat.reshape(len(alphas), n0, frame.N), G=G, H=H, HR_norm=HR_norm,
                       reversed=reversed)
    err = np.abs(fam.phi_matrix(t) - np.eye(frame.N)).max()
    if err > max(tol, 1e-8):
        raise InternalConsistencyError(f"endpoint condition violated by {err:.3e}")
    return fam


def jacobian_profile(family: CurvedFamily, s_list):
    """Determinants and gradient norms of ``Phi(s)^{-1}`` with a log-log exponent fit."""
    fr, t = family.frame, family.t
    bound_exp = fr.N * max(family.alphas) + fr.homogeneous_dimension
    rows = []
    for s in s_list:
        if not 0 < s <= t:
            raise InvalidInputError("need 0 < s <= t")
        rows.append({"s": float(s), "det": family.inverse_jacobian_det(s),
                     "gradient_norm": family.gradient_norm(s)})
    ratio = np.array([t / r["s"] for r in rows])
    dets = np.array([r["det"] for r in rows])
    grads = np.array([r["gradient_norm"] for r in rows])
    fit = grad_fit = np.nan
    if np.unique(ratio).size >= 2:
        fit = float(np.polyfit(np.log(ratio), np.log(dets), 1)[0])
        grad_fit = float(np.polyfit(np.log(ratio), np.log(grads), 1)[0])
    C = float(np.max(dets / ratio ** bound_exp))
    return {"rows": rows, "fitted_exponent": fit, "bound_exponent": bound_exp,
            "gradient_exponent": grad_fit, "alpha_star": max(family.alphas),
            "constant": C, "ok": bool(np.isnan(fit) or fit <= bound_exp + 0.1)}


def integrability_proxy(family: CurvedFamily, p, levels=10, extended=80):
    """Dyadic sum of ``|det grad Phi^{-1}(s)|**(1/(p-1)) ds`` and its relative tail."""
    t = family.t
    terms = []
    for k in range(1, extended + 1):
        s = t * 0.5 ** k
        terms.append(family.inverse_jacobian_det(s) ** (1.0 / (p - 1.0)) * 0.5 * s)
    terms = np.array(terms)
    total, head = terms.sum(), terms[:levels].sum()
    ratio = float(terms[-1] / terms[-2])
    tail = float((total - head) / total) if ratio < 1 else np.inf
    return {"relative_tail": tail, "term_ratio": ratio, "converges": bool(ratio < 1 and tail < 0.01)}


def psi_families(frame, h, t, alphas):
    """Forward family on ``[-1, (t-1)/2]`` and backward family on ``[(t-1)/2, t]``."""
    if not -1 < t <= 0:
        raise InvalidInputError("cylinder time must lie in (-1, 0]")
    T = 0.5 * (1.0 + t)
    fwd = build_curved_family(frame, h, T, alphas)
    bwd = build_curved_family(negated_frame(frame), h, T, alphas, reversed=True)
    return fwd, bwd


def concatenated_psi(family_fwd: CurvedFamily, family_bwd: CurvedFamily, w, steps=512, tol=1e-8):
    """Path ``0 -> w -> 0`` on ``[-1, t]`` joining the two families at the midpoint.

    The backward half runs the family of ``-A`` in reversed time, so its
    control is ``-beta_bwd(t - tau)``.
    """
    if not family_bwd.reversed or family_fwd.reversed:
        raise InvalidInputError("expected a forward and a reversed family")
    if abs(family_fwd.t - family_bwd.t) > 1e-14 or family_fwd.h != family_bwd.h:
        raise InvalidInputError("families must share h and horizon")
    w = np.asarray(w, dtype=float)
    T = family_fwd.t
    t_end = 2.0 * T - 1.0
    mid = -1.0 + T
    gap = np.linalg.norm(family_fwd.phi(T, w) - family_bwd.phi(T, w))
    if gap > tol * max(1.0, np.linalg.norm(w)):
        raise InternalConsistencyError(f"midpoint mismatch {gap:.3e}")
    steps += steps % 2
    times = np.linspace(-1.0, t_end, steps + 1)
    states = np.empty((steps + 1, w.size))
    for k, tau in enumerate(times):
        if tau <= mid:
            states[k] = family_fwd.phi(tau + 1.0, w)
        else:
            states[k] = family_bwd.phi(max(t_end - tau, 0.0), w)
    centres = 0.5 * (times[:-1] + times[1:])
    first = centres < mid
    controls = np.empty((steps, w.size))
    controls[first] = family_fwd.control(centres[first] + 1.0, w)
    controls[~first] = -family_bwd.control(t_end - centres[~first], w)
    return Trajectory(times=times, states=states, controls=controls, cost=np.nan)


def psi_cost(family_fwd, family_bwd, w, q_conj):
    """``(1/q') int |beta|**q'`` over both halves, by graded quadrature."""
    return (family_fwd.cost(w, q_conj) + family_bwd.cost(w, q_conj)) / q_conj


@dataclass(frozen=True, eq=False)
class ConeSet:
    """Image of the unit ball under ``eps**(a p / N) (1+t)**b S(1+t)``."""

    frame: object
    p: float
    q: float
    epsilon: float
    t: float
    a: float
    b: float
    mu: float
    nu: float

    @property
    def shape_matrix(self):
        N = self.frame.N
        return self.epsilon ** (self.a * self.p / N) * (1.0 + self.t) ** self.b * self.frame.S(1.0 + self.t)

    def contains(self, w):
        return bool(np.linalg.norm(np.linalg.solve(self.shape_matrix, np.asarray(w, dtype=float))) < 1.0)

    def volume(self):
        N = self.frame.N
        ball = math.pi ** (N / 2) / gamma_fn(N / 2 + 1)
        return float(abs(np.linalg.det(self.shape_matrix)) * ball)


def cone_threshold(frame, q):
    return frame.N / q + 1 + frame.homogeneous_dimension


def cone_set(frame, p, q, epsilon, t):
    """Exponents ``a, b`` balancing the two error terms in the cone averaging.

    ``a = N/(N + p q')`` and ``b = 1/q + (p - (1 + N/q + sum i n_i))/(N + p q')``,
    so that ``q'(b - 1/q) = 1 - (1 + N b + sum i n_i)/p``.
    """
    threshold = cone_threshold(frame, q)
    if not p > threshold:
        raise InvalidExponentError(
            f"integrability exponent p={p} must exceed N/q + 1 + sum j n_j = {threshold}")
    if not epsilon > 0 or not -1 < t <= 0:
        raise InvalidInputError("need epsilon > 0 and t in (-1, 0]")
    N, qc, Sig = frame.N, conjugate_exponent(q), frame.homogeneous_dimension
    a = N / (N + p * qc)
    b = 1.0 / q + (p - (1 + N / q + Sig)) / (N + p * qc)
    mu = p * qc / (N + p * qc)
    nu = qc * (b - 1.0 / q)
    balance = 1.0 - (1.0 + N * b + Sig) / p
    if abs(nu - balance) > 1e-12 or abs(mu - (1 - a)) > 1e-12:
        raise InternalConsistencyError("cone exponents fail their balance identities")
    return ConeSet(frame=frame, p=float(p), q=float(q), epsilon=float(epsilon), t=float(t),
                   a=a, b=b, mu=mu, nu=nu)
