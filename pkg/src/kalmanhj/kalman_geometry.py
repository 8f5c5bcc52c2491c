"""Kalman decomposition of a controlled linear drift.

Given a drift ``A`` and an orthogonal projection ``P0`` onto the controlled
directions, the state space splits into strata ``E_0, ..., E_kappa`` where
``E_k`` collects the directions first reached after ``k`` applications of
``A``. Everything downstream (scalings, cylinders, costs) is expressed in the
adapted basis produced here.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_projection, as_square
from .errors import (
    AmbiguousRankError,
    InternalConsistencyError,
    InvalidInputError,
    NotControllableError,
)

RANK_RTOL = 1e-10
# Singular values strictly inside this relative band make the rank call unsafe.
AMBIGUOUS_BAND = (1e-12, 1e-8)


@dataclass(frozen=True, eq=False)
class KalmanFrame:
    """Adapted orthonormal basis and stratum projections.

    Attributes
    ----------
    N : int
        State dimension.
    kappa : int
        Depth of the stratification (minimal number of drift applications).
    n : tuple of int
        Stratum dimensions ``dim E_j``.
    Q : ndarray (N, N)
        Orthogonal matrix whose consecutive column blocks span ``E_0..E_kappa``.
    P : tuple of ndarray
        Orthogonal projections onto the strata.
    A0 : ndarray (N, N)
        Principal part: only the blocks mapping ``E_j`` into ``E_{j+1}``.
    A : ndarray (N, N)
        The drift the frame was built from.
    """

    N: int
    kappa: int
    n: tuple
    Q: np.ndarray
    P: tuple
    A0: np.ndarray
    A: np.ndarray
    singular_gap: float = field(default=np.inf)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.n)]).astype(int)

    @property
    def strata_index(self):
        """Stratum number of each adapted coordinate."""
        return np.repeat(np.arange(self.kappa + 1), self.n)

    @property
    def homogeneous_dimension(self):
        """``sum_j j * n_j``."""
        return int(sum(j * nj for j, nj in enumerate(self.n)))

    def block(self, j):
        o = self.offsets
        return self.Q[:, o[j]:o[j + 1]]

    def S(self, r):
        """Anisotropic scaling ``sum_i r**i P_i``; ``S(0) = P_0``."""
        weights = np.array([float(r) ** j for j in self.strata_index])
        return (self.Q * weights) @ self.Q.T

    def S_inv(self, r):
        if r == 0:
            raise InvalidInputError("S(0) is not invertible")
        return self.S(1.0 / r)

    def to_adapted(self, x):
        return np.asarray(x) @ self.Q

    def from_adapted(self, y):
        return np.asarray(y) @ self.Q.T

    def to_dict(self):
        return {
            "N": self.N,
            "kappa": self.kappa,
            "n": list(self.n),
            "Q": self.Q.tolist(),
            "A0": self.A0.tolist(),
            "A": self.A.tolist(),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d):
        N, kappa, n = int(d["N"]), int(d["kappa"]), tuple(int(v) for v in d["n"])
        Q = np.asarray(d["Q"], dtype=float)
        A0 = np.asarray(d["A0"], dtype=float)
        A = np.asarray(d.get("A", d["A0"]), dtype=float)
        if Q.shape != (N, N) or sum(n) != N or len(n) != kappa + 1:
            raise InvalidInputError("inconsistent frame document")
        offsets = np.concatenate([[0], np.cumsum(n)])
        P = tuple(Q[:, offsets[j]:offsets[j + 1]] @ Q[:, offsets[j]:offsets[j + 1]].T
                  for j in range(kappa + 1))
        return cls(N=N, kappa=kappa, n=n, Q=Q, P=P, A0=A0, A=A)

    @classmethod
    def from_json(cls, text_or_path):
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class DriftBundle:
    A: np.ndarray
    P0_input: np.ndarray
    frame: KalmanFrame


def _kalman_matrix(A, P0, K):
    blocks, M = [], P0
    for _ in range(K + 1):
        blocks.append(M)
        M = A @ M
    return np.hstack(blocks)


def _numerical_rank(M, rtol=RANK_RTOL):
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, s
    return int(np.sum(s > rtol * s[0])), s


def check_kalman_rank(A, P0, K):
    """Whether ``Im P0 + Im A P0 + ... + Im A^K P0`` is the whole space."""
    A = as_square(A)
    P0 = as_projection(P0, A.shape[0])
    if K < 0:
        raise InvalidInputError("K must be non-negative")
    rank, _ = _numerical_rank(_kalman_matrix(A, P0, int(K)))
    return rank == A.shape[0]


def _orthonormal_columns(M, count):
    U, _, _ = np.linalg.svd(M, full_matrices=False)
    U = U[:, :count]
    # Deterministic signs: the largest entry of each column is positive.
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def build_frame(A, P0):
    """Kalman decomposition of ``(A, P0)``.

    Strata are obtained by orthonormalising the image of ``A`` on the last
    stratum against everything found so far; stratum sizes are read off the
    numerical ranks of the stacked Kalman matrices, so ``kappa`` agrees with
    :func:`check_kalman_rank`.
    """
    A = as_square(A)
    N = A.shape[0]
    P0 = as_projection(P0, N)
    blocks, dims = [], []
    prev_rank = 0
    worst_gap = np.inf
    for k in range(N):
        rank, s = _numerical_rank(_kalman_matrix(A, P0, k))
        rel = s / s[0] if s.size and s[0] > 0 else s
        if np.any((rel > AMBIGUOUS_BAND[0]) & (rel < AMBIGUOUS_BAND[1])):
            raise AmbiguousRankError(
                f"Kalman matrix at depth {k} has singular values in the ambiguous band; "
                f"relative spectrum tail {rel[max(rank - 1, 0):rank + 1]}")
        if rank < s.size:
            worst_gap = min(worst_gap, rel[rank - 1] / max(rel[rank], 1e-300))
        d = rank - prev_rank
        if d <= 0:
            break
        if k == 0:
            candidate = P0
        else:
            V = np.hstack(blocks)
            candidate = A @ blocks[-1]
            for _ in range(2):
                candidate = candidate - V @ (V.T @ candidate)
        blocks.append(_orthonormal_columns(candidate, d))
        dims.append(d)
        prev_rank = rank
        if rank == N:
            break
    if prev_rank < N:
        raise NotControllableError(
            f"Kalman rank condition fails: reachable dimension {prev_rank} < {N}")
    Q = np.hstack(blocks)
    kappa = len(dims) - 1
    P = tuple(B @ B.T for B in blocks)
    A0 = sum((P[j + 1] @ A @ P[j] for j in range(kappa)), np.zeros((N, N)))
    return KalmanFrame(N=N, kappa=kappa, n=tuple(dims), Q=Q, P=P, A0=A0, A=A.copy(),
                       singular_gap=float(worst_gap))


def frame_invariant_errors(frame, P0=None):
    """Largest violation of each structural identity of a frame."""
    N, P, A = frame.N, frame.P, frame.A
    eye = np.eye(N)
    out = {
        "orthogonality": np.abs(frame.Q.T @ frame.Q - eye).max(),
        "idempotent": max(np.abs(Pj @ Pj - Pj).max() for Pj in P),
        "symmetric": max(np.abs(Pj - Pj.T).max() for Pj in P),
        "mutual": max((np.abs(P[i] @ P[j]).max() for i in range(len(P))
                       for j in range(len(P)) if i != j), default=0.0),
        "partition": np.abs(sum(P) - eye).max(),
        "nilpotent": np.abs(np.linalg.matrix_power(frame.A0, frame.kappa + 1)).max(),
    }
    # Block form: A maps E_k into E_0 + ... + E_{k+1}.
    block = 0.0
    for k in range(frame.kappa + 1):
        for i in range(k + 2, frame.kappa + 1):
            block = max(block, np.abs(P[i] @ A @ P[k]).max())
    out["block_form"] = block
    if P0 is not None:
        out["P0_match"] = np.abs(P[0] - P0).max()
    return out


def rescaled_drift(frame, A=None, h=0.0):
    """``A_h = sum_j sum_{i <= min(kappa, j+1)} h**(j+1-i) P_i A P_j``.

    ``h = 0`` yields the principal part. Negative ``h`` is accepted since
    only integer powers occur.
    """
    A = frame.A if A is None else as_square(A)
    h = float(h)
    # In adapted coordinates the entry (a, b) carries h**(j_b + 1 - i_a).
    idx = frame.strata_index
    power = idx[None, :] + 1 - idx[:, None]
    B = frame.Q.T @ A @ frame.Q
    weights = np.where(power >= 0, h ** np.maximum(power, 0), 0.0)
    return frame.Q @ (B * weights) @ frame.Q.T


def principal_exponential(frame, tau):
    """``exp(tau A0)`` as the finite series of a nilpotent matrix."""
    out = np.eye(frame.N)
    term = np.eye(frame.N)
    for l in range(1, frame.kappa + 1):
        term = term @ frame.A0 * (tau / l)
        out = out + term
    return out


def flow_remainder_RA(frame, A=None, tau=1.0, h=0.0, tol=1e-16, max_terms=2000):
    """Remainder ``R_A(tau; h)`` of the flow representation.

    ``R_A = sum_{i,j} sum_{m >= max(1, j-i)} h**m tau**(m+i-j)/(m+i-j)! P_i A**(m+i-j) P_j``.
    The ``m``-sum stops once every term bound ``|h|**m ||A||**l / l!`` is
    below ``tol`` and the bounds decrease geometrically.
    """
    A = frame.A if A is None else as_square(A)
    h, tau = float(h), float(tau)
    N, kappa, P = frame.N, frame.kappa, frame.P
    out = np.zeros((N, N))
    if h == 0.0:
        return out
    normA = np.linalg.norm(A, 2)
    powers = [np.eye(N)]
    prev_bound = np.inf
    for m in range(1, max_terms + 1):
        while len(powers) <= m + kappa:
            powers.append(powers[-1] @ A)
        bound = 0.0
        hm = h ** m
        for i in range(kappa + 1):
            for j in range(kappa + 1):
                if m < max(1, j - i):
                    continue
                l = m + i - j
                coef = hm * tau ** l / math.factorial(l)
                out += coef * (P[i] @ powers[l] @ P[j])
                bound = max(bound, abs(hm) * normA ** l / math.factorial(l))
        if m > kappa and bound < tol and bound <= 0.5 * prev_bound:
            return out
        prev_bound = bound
    raise InternalConsistencyError("flow remainder series did not reach tolerance")


def flow_matrix(frame, A=None, r=1.0, tau=1.0, h=0.0, rtol=1e-8):
    """``exp(r tau A_h)``, cross-checked against the scaled series form.

    The direct exponential is returned; the route
    ``S(r) (exp(tau A0) + R_A(tau; h r)) S(r)^{-1}`` must agree to ``rtol``.
    """
    if r == 0:
        raise InvalidInputError("r must be nonzero")
    A = frame.A if A is None else as_square(A)
    direct = expm(r * tau * rescaled_drift(frame, A, h))
    series = frame.S(r) @ (principal_exponential(frame, tau)
                           + flow_remainder_RA(frame, A, tau, h * r)) @ frame.S_inv(r)
    dev = flow_deviation(direct, series)
    if dev > rtol:
        raise InternalConsistencyError(
            f"flow representation mismatch: relative deviation {dev:.3e}")
    return direct


def flow_deviation(direct, series):
    return np.linalg.norm(direct - series) / max(np.linalg.norm(direct), 1e-300)


def load_matrix(source):
    """Read a matrix from a CSV file, a JSON file or an inline JSON string."""
    if isinstance(source, (list, tuple, np.ndarray)):
        return np.asarray(source, dtype=float)
    text = str(source)
    stripped = text.lstrip()
    if stripped.startswith("["):
        return np.asarray(json.loads(stripped), dtype=float)
    path = Path(text)
    content = path.read_text()
    if path.suffix.lower() == ".json" or content.lstrip().startswith("["):
        return np.asarray(json.loads(content), dtype=float)
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


class KalmanDecomposition(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(A, P0)`` then map states to adapted coordinates.

    Parameters
    ----------
    scale : float
        Anisotropic scale applied by :meth:`transform` (``S(scale)^{-1}`` in
        adapted coordinates); ``1.0`` leaves lengths unchanged.
    """

    def __init__(self, scale=1.0):
        self.scale = scale

    def fit(self, A, P0):
        self.frame_ = build_frame(A, P0)
        self.kappa_ = self.frame_.kappa
        self.n_ = self.frame_.n
        self.principal_part_ = self.frame_.A0
        return self

    def transform(self, X):
        check_is_fitted(self, "frame_")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.frame_.N:
            raise InvalidInputError(f"expected {self.frame_.N} columns, got {X.shape[1]}")
        weights = float(self.scale) ** (-self.frame_.strata_index.astype(float))
        return self.frame_.to_adapted(X) * weights

    def inverse_transform(self, Y):
        check_is_fitted(self, "frame_")
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        weights = float(self.scale) ** self.frame_.strata_index.astype(float)
        return self.frame_.from_adapted(Y * weights)
