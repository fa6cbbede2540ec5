"""Two-precision GMRES rules and LU-preconditioned iterative refinement.

The two floating formats are an abstraction pair (Low, High) instantiated as
binary32/binary64; policies say which of the working, residual, factorization
and solution-update computations run in which format.  Whenever the working
format is Low, residuals and solution updates must stay High: the policy
constructor enforces that rule, so invalid combinations are unrepresentable.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import CsrMatrix, SingularMatrixError, as_matvec
from .solvers import GmresOptions, SolveReport, _restarted_engine, _zero_rhs_report

__all__ = [
    "Precision",
    "PrecisionPolicy",
    "LowLU",
    "lu_low",
    "gmres_ir",
    "gmres_two_precision",
    "low_operator",
]

LOW_DTYPE = np.float32
HIGH_DTYPE = np.float64
DESK_SCALE_LIMIT = 2000


class Precision(str, Enum):
    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class PrecisionPolicy:
    working: Precision = Precision.HIGH
    residual: Precision = Precision.HIGH
    factorization: Precision = Precision.HIGH
    solution_update: Precision = Precision.HIGH

    def __post_init__(self):
        for name in ("working", "residual", "factorization", "solution_update"):
            object.__setattr__(self, name, Precision(getattr(self, name)))
        if self.working is Precision.LOW:
            if self.residual is not Precision.HIGH:
                raise ValueError("residual computation must stay High when working is Low")
            if self.solution_update is not Precision.HIGH:
                raise ValueError("solution updates must stay High when working is Low")

    def is_low(self, name):
        return getattr(self, name) is Precision.LOW

    def dtype_of(self, name):
        return LOW_DTYPE if self.is_low(name) else HIGH_DTYPE

    @classmethod
    def all_high(cls):
        return cls()

    @classmethod
    def two_precision(cls):
        """Low working format with High residuals and solution updates."""
        return cls(working=Precision.LOW, residual=Precision.HIGH,
                   factorization=Precision.HIGH, solution_update=Precision.HIGH)

    @classmethod
    def refinement(cls):
        """GMRES-IR: Low factorization and inner solves, High outer loop."""
        return cls(working=Precision.LOW, residual=Precision.HIGH,
                   factorization=Precision.LOW, solution_update=Precision.HIGH)


def _densify(A, n=None):
    if isinstance(A, CsrMatrix):
        return A.to_dense()
    if isinstance(A, np.ndarray):
        return np.asarray(A, dtype=np.float64)
    raise TypeError("mixed-precision routines need an explicit matrix "
                    "(CsrMatrix or ndarray) at desk scale")


def low_operator(A, dtype, n=None):
    """Matvec of A carried out genuinely in the low format.

    Explicit matrices are densified and cast once (desk scale), so the BLAS
    product accumulates in the low format; callables are cast through.
    """
    dtype = np.dtype(dtype)
    try:
        dense = _densify(A).astype(dtype)
    except TypeError:
        matvec, _ = as_matvec(A, n=n)
        return lambda v: np.asarray(matvec(np.asarray(v, dtype=np.float64)), dtype=dtype)
    return lambda v: dense @ np.asarray(v, dtype=dtype)


@dataclass
class LowLU:
    """Partial-pivoting LU factors stored in the low format."""

    L: np.ndarray
    U: np.ndarray
    perm: np.ndarray
    growth: float

    def solve(self, rhs):
        """Triangular solves in the factors' own format."""
        dtype = self.L.dtype
        y = np.asarray(rhs, dtype=dtype)[self.perm].copy()
        n = len(y)
        for k in range(n):
            y[k + 1:] -= self.L[k + 1:, k] * y[k]
        for k in range(n - 1, -1, -1):
            y[k] = y[k] / self.U[k, k]
            y[:k] -= self.U[:k, k] * y[k]
        return y


def lu_low(A, dtype=LOW_DTYPE):
    """LU factorization with partial pivoting carried out in the low format.

    Reports the growth factor max|U| / max|A| as a quality diagnostic and
    raises SingularMatrixError when a pivot vanishes in the low format.
    """
    dense = _densify(A)
    n = dense.shape[0]
    if dense.shape != (n, n):
        raise ValueError("matrix must be square")
    if n > DESK_SCALE_LIMIT:
        raise ValueError(f"dense factorization capped at n <= {DESK_SCALE_LIMIT}")
    dtype = np.dtype(dtype)
    U = dense.astype(dtype)
    amax = float(np.abs(U).max()) if n else 0.0
    L = np.eye(n, dtype=dtype)
    perm = np.arange(n)
    for k in range(n - 1):
        p = k + int(np.argmax(np.abs(U[k:, k])))
        if U[p, k] == 0:
            raise SingularMatrixError(k, "matrix is singular in the low format")
        if p != k:
            U[[k, p], k:] = U[[p, k], k:]
            L[[k, p], :k] = L[[p, k], :k]
            perm[[k, p]] = perm[[p, k]]
        L[k + 1:, k] = U[k + 1:, k] / U[k, k]
        U[k + 1:, k:] -= np.outer(L[k + 1:, k], U[k, k:])
        U[k + 1:, k] = 0
    if n and U[n - 1, n - 1] == 0:
        raise SingularMatrixError(n - 1, "matrix is singular in the low format")
    growth = float(np.abs(U).max()) / amax if amax else 0.0
    return LowLU(L=L, U=U, perm=perm, growth=growth)


def _low_gmres(matvec, b, dtype, rtol, restart, max_iter):
    """Compact restarted MGS-GMRES running entirely in the given dtype.

    Inner solver for refinement; returns (x, iterations, matvecs).
    """
    from .linalg import HessenbergLsState

    dtype = np.dtype(dtype)
    b = np.asarray(b, dtype=dtype)
    N = len(b)
    x = np.zeros(N, dtype=dtype)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, 0, 0
    tol = rtol * bnorm
    total = 0
    matvecs = 0
    while total < max_iter:
        r = b - np.asarray(matvec(x), dtype=dtype)
        matvecs += 1
        beta = float(np.linalg.norm(r))
        if beta <= tol:
            break
        m = min(restart, max_iter - total)
        V = np.zeros((N, m + 1), dtype=dtype)
        V[:, 0] = r / beta
        H = np.zeros((m + 1, m), dtype=dtype)
        ls = HessenbergLsState(m, beta, dtype=dtype)
        n = 0
        for j in range(m):
            w = np.asarray(matvec(V[:, j]), dtype=dtype)
            matvecs += 1
            for i in range(j + 1):
                H[i, j] = float(w @ V[:, i])
                w = w - H[i, j] * V[:, i]
            h_sub = float(np.linalg.norm(w))
            H[j + 1, j] = h_sub
            n = j + 1
            rho = ls.push_column(H[: j + 2, j])
            if h_sub <= 1e-7 * max(abs(H[: j + 2, j]).max(), 1e-30):
                break
            V[:, j + 1] = w / h_sub
            if rho <= tol:
                break
        y = ls.solve(n)
        x = x + V[:, :n] @ y
        total += n
        if ls.rho <= tol:
            break
    return x, total, matvecs


def gmres_ir(A, b, policy=None, inner_opts=None, *, rtol=1e-13,
             max_refinements=40):
    """Iterative refinement with a low-precision LU preconditioner.

    Outer residuals and solution updates run High; the inner GMRES solves
    M^{-1} A d = M^{-1} r entirely in the low format with M = LU.  Terminates
    on the High-precision relative residual, the refinement budget, or a
    stagnation abort when the residual stops contracting.
    """
    policy = policy if policy is not None else PrecisionPolicy.refinement()
    inner_opts = inner_opts if inner_opts is not None else \
        GmresOptions(rtol=1e-4, restart=50, max_iter=200)
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    dense_high = _densify(A)
    low_dtype = policy.dtype_of("factorization")
    dense_low = dense_high.astype(low_dtype)
    lu = lu_low(dense_high, low_dtype)
    matvecs = 0

    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return _zero_rhs_report(N)

    x = lu.solve(np.asarray(b, dtype=low_dtype)).astype(np.float64)
    r = b - dense_high @ x
    matvecs += 1
    history = [float(np.linalg.norm(r))]
    inner_iters = []
    termination = "maxiter"
    no_progress = 0

    def inner_matvec(v):
        return lu.solve(dense_low @ np.asarray(v, dtype=low_dtype))

    for _ in range(max_refinements):
        if history[-1] <= rtol * bnorm:
            termination = "converged"
            break
        rhs = lu.solve(np.asarray(r, dtype=low_dtype))
        d, iters, mv = _low_gmres(inner_matvec, rhs, low_dtype,
                                  inner_opts.rtol, inner_opts.restart or 50,
                                  inner_opts.max_iter or 200)
        matvecs += mv
        inner_iters.append(iters)
        x = x + d.astype(np.float64)
        r = b - dense_high @ x
        matvecs += 1
        history.append(float(np.linalg.norm(r)))
        if history[-1] >= 0.5 * history[-2]:
            no_progress += 1
            if no_progress >= 2:
                termination = "stagnation"
                break
        else:
            no_progress = 0
    else:
        if history[-1] <= rtol * bnorm:
            termination = "converged"

    return SolveReport(
        x=x,
        residual_history=history,
        iterations=len(history) - 1,
        termination=termination,
        matvecs=matvecs,
        true_residual_checkpoints=[(len(history) - 1, history[-1])],
        estimated_norm_checkpoints=[(len(history) - 1, history[-1])],
        diagnostics={"growth_factor": lu.growth, "inner_iterations": inner_iters},
    )


def gmres_two_precision(A, b, x0=None, opts=None, policy=None):
    """Restarted GMRES with inner cycles in the low format.

    Per the two-precision rules the system itself, restart residuals, and
    iterate updates stay in the high format.  With an all-High policy this is
    the plain restarted algorithm, bit for bit.
    """
    policy = policy if policy is not None else PrecisionPolicy.two_precision()
    opts = opts if opts is not None else GmresOptions()
    if opts.restart is None:
        from .solvers import _clone_options
        opts = _clone_options(opts, restart=50)
    return _restarted_engine(A, b, x0, opts, policy=policy)
