"""Arnoldi process variants over one stepping engine.

Every scheme builds the relation A V_n = V_{n+1} Hbar_n and is instrumented
with a counter of modeled global reductions: one reduction = one batch of
inner products / norms whose operands are all available at the same time.
Per-step costs are structural properties of each scheme:

    MGS   j+1   (j sequential projections plus the norm)
    CGS     2   (one batched projection, one norm)
    CGS2    3   (two batched projections, one norm)
    CGSP    1   (projections and the squared norm share one batch)
    ICWY    1   (lagged normalization merges everything into one batch)

The initial normalization of r0 is counted toward the total but belongs to
no step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import as_matvec, forward_substitute_unit

__all__ = [
    "OrthoScheme",
    "ReductionCounter",
    "ArnoldiDecomposition",
    "ArnoldiProcess",
    "IcwyState",
    "OrthogonalizationBreakdown",
    "arnoldi",
    "householder_arnoldi",
    "icwy_project",
]

BREAKDOWN_REL = 1e-14


class OrthoScheme(str, Enum):
    MGS = "mgs"
    CGS = "cgs"
    CGS2 = "cgs2"
    CGSP = "cgsp"
    ICWY = "icwy"


class OrthogonalizationBreakdown(RuntimeError):
    """Instability breakdown (e.g. a negative CGS-P radicand), distinct from
    the happy breakdown that signals an invariant Krylov subspace."""


class ReductionCounter:
    """Counts modeled global reductions, optionally bucketed per Arnoldi step.

    marks snapshots the running total once per delivered solver iteration so
    reports can expose exact cumulative counts.
    """

    def __init__(self):
        self.total = 0
        self.per_step = []
        self.marks = []
        self._in_step = False

    def count(self, n=1):
        self.total += n
        if self._in_step:
            self.per_step[-1] += n

    def begin_step(self):
        self.per_step.append(0)
        self._in_step = True

    def end_step(self):
        self._in_step = False

    def mark(self):
        self.marks.append(self.total)


@dataclass
class ArnoldiDecomposition:
    """Orthonormal basis V, Hessenberg factor Hbar, and the reduction tally.

    After n completed steps V is N x (n+1) and Hbar is (n+1) x n.  On happy
    breakdown at the grade d, V is N x d and Hbar is (d+1) x d with an exactly
    zero last row (there is no v_{d+1}).
    """

    V: np.ndarray
    Hbar: np.ndarray
    n: int
    reductions: int
    reduction_log: list = field(default_factory=list)
    breakdown_at: int | None = None

    def relation_residual(self, matvec):
        """Frobenius norm of A V_n - V_{n+1} Hbar_n."""
        n = self.n
        AV = np.column_stack([matvec(self.V[:, j]) for j in range(n)])
        return float(np.linalg.norm(AV - self.V @ self.Hbar[: self.V.shape[1], :n]))

    def gram_residual(self):
        """2-norm of V^T V - I (loss of orthogonality)."""
        G = self.V.T @ self.V
        return float(np.linalg.norm(G - np.eye(G.shape[0]), 2))


@dataclass
class IcwyState:
    """Strictly lower triangular correction matrix of the inverse compact WY form."""

    L: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=np.float64)
        if np.any(np.triu(L) != 0.0):
            raise ValueError("L must be strictly lower triangular")
        self.L = L


def icwy_project(state: IcwyState, V, w):
    """Projection coefficients h = (I + L)^{-1} (V^T w) by one forward substitution.

    Equals the sequential MGS coefficients in exact arithmetic.
    """
    V = np.asarray(V)
    k = V.shape[1]
    if state.L.shape[0] < k:
        raise ValueError("correction matrix smaller than the basis")
    rhs = V.T @ np.asarray(w)
    return forward_substitute_unit(state.L[:k, :k], rhs)


class ArnoldiProcess:
    """Stepwise Arnoldi driver for the Gram-Schmidt family of schemes.

    ``step()`` advances one column and returns the number of Hessenberg
    columns whose entries (including the subdiagonal) are now final; ICWY
    completes column j one step late because its normalization is deferred
    into the next merged reduction.  ``finish()`` flushes any deferred work.

    weight, when given, replaces the Euclidean inner product with the
    D-inner product (u, v)_D = v^T D u throughout.
    """

    def __init__(self, A, r0, max_steps, scheme=OrthoScheme.MGS, *, weight=None,
                 counter=None, dtype=None, breakdown_rel=BREAKDOWN_REL, n=None):
        self.matvec, self.N = as_matvec(A, n=n if n is not None else len(r0))
        self.scheme = OrthoScheme(scheme)
        self.counter = counter if counter is not None else ReductionCounter()
        self.breakdown_rel = breakdown_rel
        dtype = np.dtype(dtype) if dtype is not None else np.asarray(r0).dtype
        if dtype.kind != "f":
            dtype = np.dtype(np.float64)
        self.dtype = dtype
        if max_steps >= self.N + 1:
            max_steps = self.N
        self.max_steps = max_steps
        self.weight = None if weight is None else np.asarray(weight, dtype=dtype)
        if self.weight is not None and np.any(self.weight <= 0):
            raise ValueError("weights must be positive")

        r0 = np.asarray(r0, dtype=dtype)
        self.beta = self._norm(r0)
        self.counter.count()  # initial normalization
        if self.beta == 0.0:
            raise ValueError("starting vector must be nonzero")
        self.V = np.zeros((self.N, max_steps + 1), dtype=dtype)
        self.H = np.zeros((max_steps + 1, max_steps), dtype=dtype)
        self.V[:, 0] = r0 / self.beta
        self.steps = 0          # steps started
        self.completed = 0      # final Hessenberg columns
        self.breakdown_at = None
        self.reorthogonalizations = 0
        # ICWY deferred state
        self.L = np.zeros((max_steps + 1, max_steps + 1), dtype=dtype) \
            if self.scheme is OrthoScheme.ICWY else None
        self._w_pending = None

    # -- inner product helpers -------------------------------------------------
    def _ip_block(self, B, w):
        if self.weight is None:
            return B.T @ w
        return B.T @ (self.weight * w)

    def _norm(self, w):
        if self.weight is None:
            return float(np.linalg.norm(w))
        return float(math.sqrt(abs(np.dot(w, self.weight * w))))

    # -- stepping ---------------------------------------------------------------
    def step(self):
        if self.breakdown_at is not None:
            raise RuntimeError("process already broke down")
        if self.steps >= self.max_steps:
            raise RuntimeError("max_steps exhausted")
        self.counter.begin_step()
        try:
            if self.scheme is OrthoScheme.ICWY:
                self._step_icwy()
            else:
                self._step_direct()
        finally:
            self.counter.end_step()
        self.steps += 1
        return self.completed

    def _column_scale(self, j, h_sub):
        col = self.H[: j + 1, j]
        return math.sqrt(float(col @ col) + h_sub * h_sub)

    def _is_breakdown(self, j, h_sub):
        return h_sub <= self.breakdown_rel * self._column_scale(j, h_sub)

    def _step_direct(self):
        j = self.steps
        V = self.V[:, : j + 1]
        w = np.asarray(self.matvec(self.V[:, j]), dtype=self.dtype)
        if self.scheme is OrthoScheme.MGS:
            h = np.zeros(j + 1, dtype=self.dtype)
            for i in range(j + 1):
                h[i] = self._ip(w, self.V[:, i])
                self.counter.count()
                w = w - h[i] * self.V[:, i]
            h_sub = self._norm(w)
            self.counter.count()
        elif self.scheme is OrthoScheme.CGS:
            h = self._ip_block(V, w)
            self.counter.count()
            w = w - V @ h
            h_sub = self._norm(w)
            self.counter.count()
        elif self.scheme is OrthoScheme.CGS2:
            h, w, h_sub = self._cgs2_pass(V, w)
        elif self.scheme is OrthoScheme.CGSP:
            h = self._ip_block(V, w)
            sigma = self._norm(w)  # shares the batch with the projections
            self.counter.count()
            radicand = sigma * sigma - float(h @ h)
            # the subtraction cannot resolve radicands near its rounding floor,
            # and the basis's accumulated orthogonality defect enters the
            # difference squared; suspicious steps are retried once with a
            # trustworthy reorthogonalization
            eps = float(np.finfo(self.dtype).eps)
            floor = sigma * sigma * max(64.0 * (j + 2) * eps, 1e-8)
            if radicand < floor:
                h, w, h_sub = self._cgs2_pass(V, w)
                self.reorthogonalizations += 1
                if not math.isfinite(h_sub):
                    raise OrthogonalizationBreakdown(
                        f"CGS-P breakdown not recoverable at step {j + 1}")
            else:
                w = w - V @ h
                h_sub = math.sqrt(radicand)
        else:  # pragma: no cover
            raise ValueError(f"unhandled scheme {self.scheme}")
        self.H[: j + 1, j] = h
        if self._is_breakdown(j, h_sub):
            self.H[j + 1, j] = 0.0
            self.breakdown_at = j + 1
            self.completed = j + 1
            return
        self.H[j + 1, j] = h_sub
        self.V[:, j + 1] = w / h_sub
        self.completed = j + 1

    def _ip(self, u, v):
        if self.weight is None:
            return float(np.dot(u, v))
        return float(np.dot(v, self.weight * u))

    def _cgs2_pass(self, V, w):
        h1 = self._ip_block(V, w)
        self.counter.count()
        w = w - V @ h1
        h2 = self._ip_block(V, w)
        self.counter.count()
        w = w - V @ h2
        h_sub = self._norm(w)
        self.counter.count()
        return h1 + h2, w, h_sub

    def _step_icwy(self):
        k = self.steps
        if k == 0:
            # inferred first step: w1 = A v1, projected against v1 only
            w = np.asarray(self.matvec(self.V[:, 0]), dtype=self.dtype)
            h00 = self._ip(w, self.V[:, 0])
            self.counter.count()
            self.H[0, 0] = h00
            self._w_pending = w - h00 * self.V[:, 0]
            self.completed = 0
            return
        wp = self._w_pending
        w_new = np.asarray(self.matvec(wp), dtype=self.dtype)
        # one merged reduction: the L-row for the incoming basis vector, the
        # projections of A w_pending, and the deferred normalization
        Vk = self.V[:, :k]
        l_row = self._ip_block(Vk, wp)
        u = np.empty(k + 1, dtype=self.dtype)
        u[:k] = self._ip_block(Vk, w_new)
        u[k] = self._ip(w_new, wp)
        h_sub = self._norm(wp)
        self.counter.count()
        if self._is_breakdown(k - 1, h_sub):
            self.H[k, k - 1] = 0.0
            self.breakdown_at = k
            self.completed = k
            return
        self.H[k, k - 1] = h_sub
        self.V[:, k] = wp / h_sub
        self.L[k, :k] = l_row / h_sub
        u = u / h_sub
        u[k] = u[k] / h_sub
        w_new = w_new / h_sub
        h_col = forward_substitute_unit(self.L[: k + 1, : k + 1], u)
        self.H[: k + 1, k] = h_col
        self._w_pending = w_new - self.V[:, : k + 1] @ h_col
        self.completed = k

    def finish(self):
        """Flush deferred normalizations and return the decomposition."""
        if (self.scheme is OrthoScheme.ICWY and self.breakdown_at is None
                and self.steps > 0 and self.completed < self.steps):
            k = self.steps
            wp = self._w_pending
            h_sub = self._norm(wp)
            self.counter.count()  # trailing batch of the deferred normalization
            if self._is_breakdown(k - 1, h_sub):
                self.H[k, k - 1] = 0.0
                self.breakdown_at = k
            else:
                self.H[k, k - 1] = h_sub
                self.V[:, k] = wp / h_sub
            self.completed = k
        return self.decomposition()

    def decomposition(self):
        n = self.completed
        if self.breakdown_at is not None:
            V = self.V[:, :n].copy()
        else:
            V = self.V[:, : n + 1].copy()
        return ArnoldiDecomposition(
            V=V,
            Hbar=self.H[: n + 1, :n].copy(),
            n=n,
            reductions=self.counter.total,
            reduction_log=list(self.counter.per_step),
            breakdown_at=self.breakdown_at,
        )


def arnoldi(A, r0, n, scheme=OrthoScheme.MGS, *, weight=None, counter=None,
            breakdown_rel=BREAKDOWN_REL):
    """Run n Arnoldi steps of the requested scheme starting from r0.

    Parameters
    ----------
    A : CsrMatrix, ndarray or callable
        Square operator defining the Krylov space.
    r0 : ndarray
        Nonzero starting vector; v_1 = r0 / ||r0||.
    n : int
        Number of steps (capped at the space dimension).
    scheme : OrthoScheme or str
        mgs, cgs, cgs2, cgsp or icwy.
    weight : ndarray, optional
        Positive diagonal replacing the Euclidean inner product.
    counter : ReductionCounter, optional
        Receives the modeled global-reduction events.
    breakdown_rel : float
        Relative threshold on the subdiagonal entry that declares a happy
        breakdown (invariant subspace at the grade).

    Returns
    -------
    ArnoldiDecomposition
        Basis V, Hessenberg factor Hbar, per-step reduction log, and
        breakdown_at set to the grade on early termination.
    """
    proc = ArnoldiProcess(A, r0, n, scheme, weight=weight, counter=counter,
                          breakdown_rel=breakdown_rel)
    while proc.steps < proc.max_steps and proc.breakdown_at is None:
        proc.step()
    return proc.finish()


def _sign(x):
    # sign(0) taken as +1 so the reflector convention is total
    return 1.0 if x >= 0.0 else -1.0


class HouseholderArnoldi:
    """Arnoldi factorization through Householder reflectors (stepwise).

    Reflector vectors w_1..w_{n+1} are stored instead of the v's; basis
    columns are recovered on demand from the recursive product of reflectors.
    Logical signs are normalized so the subdiagonal of Hbar is nonnegative and
    v_1 = r0 / ||r0||, matching the Gram-Schmidt schemes in exact arithmetic.
    """

    def __init__(self, A, r0, max_steps, *, counter=None,
                 breakdown_rel=BREAKDOWN_REL, n=None):
        self.matvec, self.N = as_matvec(A, n=n if n is not None else len(r0))
        self.counter = counter if counter is not None else ReductionCounter()
        self.breakdown_rel = breakdown_rel
        self.max_steps = min(max_steps, self.N)
        r0 = np.asarray(r0, dtype=np.float64)
        beta_raw = np.linalg.norm(r0)
        self.counter.count()
        if beta_raw == 0.0:
            raise ValueError("starting vector must be nonzero")
        w1 = r0.copy()
        s = _sign(r0[0])
        w1[0] += s * beta_raw
        self.reflectors = [self._reflector(w1)]
        self.beta_raw = -s * beta_raw          # P1 r0 = beta_raw * e1
        self.sign = [-s]                       # logical sign of v_1 -> beta = ||r0||
        self.beta = beta_raw
        self.H = np.zeros((self.max_steps + 1, self.max_steps))
        self.steps = 0
        self.completed = 0
        self.breakdown_at = None
        self._v_cache = {}

    def _reflector(self, w):
        nrm2 = float(w @ w)
        self.counter.count()
        if nrm2 == 0.0:
            return None
        return (w, 2.0 / nrm2)

    def _apply(self, idx, x):
        item = self.reflectors[idx]
        if item is None:
            return x
        w, tau = item
        self.counter.count()
        return x - (tau * float(w @ x)) * w

    def basis_vector(self, j):
        """v_{j+1} = P_1 ... P_{j+1} e_{j+1} with the logical sign applied."""
        cached = self._v_cache.get(j)
        if cached is not None:
            return cached
        x = np.zeros(self.N)
        x[j] = 1.0
        for idx in range(j, -1, -1):
            x = self._apply(idx, x)
        v = self.sign[j] * x
        self._v_cache[j] = v
        return v

    def step(self):
        j = self.steps
        if self.breakdown_at is not None or j >= self.max_steps:
            raise RuntimeError("cannot step further")
        self.counter.begin_step()
        u = self.matvec(self.basis_vector(j))
        for idx in range(j + 1):
            u = self._apply(idx, u)
        tail = u[j + 1:]
        tail_norm = float(np.linalg.norm(tail))
        self.counter.count()
        col_scale = float(np.linalg.norm(u[: j + 2]))
        # u was formed from the sign-normalized basis vector, so the raw
        # Hessenberg column is sign[j] * u and the logical entries need only
        # the per-row signs.
        if tail_norm <= self.breakdown_rel * max(col_scale, tail_norm):
            # happy breakdown: the column's upper entries are still valid
            self.H[: j + 1, j] = np.array(self.sign[: j + 1]) * u[: j + 1]
            self.H[j + 1, j] = 0.0
            self.reflectors.append(None)
            self.sign.append(1.0)
            self.breakdown_at = j + 1
            self.completed = j + 1
            self.counter.end_step()
            self.steps += 1
            return self.completed
        w = np.zeros(self.N)
        s = _sign(u[j + 1])
        w[j + 1:] = tail
        w[j + 1] += s * tail_norm
        self.reflectors.append(self._reflector(w))
        h_sub = -s * tail_norm
        sub_sign = _sign(h_sub)
        self.sign.append(sub_sign)
        self.H[: j + 1, j] = np.array(self.sign[: j + 1]) * u[: j + 1]
        self.H[j + 1, j] = sub_sign * h_sub
        self.counter.end_step()
        self.steps += 1
        self.completed = j + 1
        return self.completed

    def eval_basis_combination(self, y):
        """V_n y by the recursive (Horner-style) product of reflectors."""
        y = np.asarray(y, dtype=np.float64)
        n = len(y)
        z = np.zeros(self.N)
        for j in range(n - 1, -1, -1):
            z[j] += self.sign[j] * y[j]
            z = self._apply(j, z)
        return z

    def decomposition(self):
        n = self.completed
        cols = n if self.breakdown_at is not None else n + 1
        V = np.column_stack([self.basis_vector(j) for j in range(cols)]) \
            if cols else np.zeros((self.N, 0))
        return ArnoldiDecomposition(
            V=V,
            Hbar=self.H[: n + 1, :n].copy(),
            n=n,
            reductions=self.counter.total,
            reduction_log=list(self.counter.per_step),
            breakdown_at=self.breakdown_at,
        )


def householder_arnoldi(A, r0, n, *, counter=None, breakdown_rel=BREAKDOWN_REL):
    """Householder-reflector Arnoldi; returns the decomposition plus the reflector store."""
    proc = HouseholderArnoldi(A, r0, n, counter=counter, breakdown_rel=breakdown_rel)
    while proc.steps < proc.max_steps and proc.breakdown_at is None:
        proc.step()
    return proc.decomposition(), proc
