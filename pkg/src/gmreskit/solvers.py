"""Minimal-residual solver family: GMRES and its classical relatives.

All solvers return a SolveReport carrying the iterate, the per-iteration
residual-norm estimates, explicitly recomputed residual checkpoints, and the
matvec / global-reduction counters.  One solve owns its state; operators and
preconditioners are only read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    HessenbergLsState,
    as_matvec,
    back_substitute,
    operator_norm_estimate,
)
from .ortho import (ArnoldiProcess, HouseholderArnoldi, OrthogonalizationBreakdown,
                    OrthoScheme, ReductionCounter)

__all__ = [
    "GmresOptions",
    "SolveReport",
    "FunctionPreconditioner",
    "DiagonalPreconditioner",
    "DenseSolvePreconditioner",
    "BreakdownError",
    "FgmresBreakdownError",
    "backward_error",
    "gmres",
    "gmres_restarted",
    "hh_gmres",
    "simpler_gmres",
    "gcr",
    "orthodir",
    "fgmres",
    "lgmres",
    "weighted_gmres",
]


class BreakdownError(RuntimeError):
    """Unrecoverable breakdown of a solver recurrence."""


class FgmresBreakdownError(BreakdownError):
    """h_{j+1,j} vanished while the flexible Hessenberg matrix is singular."""


@dataclass
class GmresOptions:
    """Knobs shared by the solver family.

    rtol is relative to ||b|| (in the inner-product norm the solver
    minimizes); restart of None means a full, non-restarted run.
    """

    rtol: float = 1e-8
    max_iter: int | None = None
    restart: int | None = None
    scheme: OrthoScheme | str = OrthoScheme.MGS
    precond_side: str = "none"
    preconditioner: object = None
    weight: np.ndarray | None = None
    simpler_omega: float = 0.5
    breakdown_rel: float = 1e-14
    stagnation_rel: float = 1e-14
    iteration_callback: object = None

    def __post_init__(self):
        if self.rtol <= 0:
            raise ValueError("rtol must be positive")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart length must be at least 1")
        self.scheme = OrthoScheme(self.scheme)
        if self.precond_side not in ("none", "left", "right"):
            raise ValueError("precond_side must be none, left or right")
        if self.precond_side != "none" and self.preconditioner is None:
            raise ValueError("preconditioner required for preconditioned runs")
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=np.float64)
            if np.any(w <= 0):
                raise ValueError("weight entries must be positive")
            self.weight = w
        if not 0.0 <= self.simpler_omega <= 1.0:
            raise ValueError("simpler_omega must lie in [0, 1]")


@dataclass
class SolveReport:
    """Outcome of one solve.

    residual_history[k] is the estimated residual norm after k iterations
    (in whatever norm the variant minimizes); true_residual_checkpoints holds
    explicitly recomputed Euclidean ||b - A x|| values at restarts and exit,
    and estimated_norm_checkpoints the same recomputation in the estimate's
    own norm (they coincide for plain runs).
    """

    x: np.ndarray
    residual_history: list
    iterations: int
    termination: str
    restarts: int = 0
    reductions: int = 0
    matvecs: int = 0
    true_residual_checkpoints: list = field(default_factory=list)
    estimated_norm_checkpoints: list = field(default_factory=list)
    reduction_log: list = field(default_factory=list)
    reduction_marks: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.termination == "converged"

    def relative_history(self):
        h0 = self.residual_history[0]
        return [v / h0 for v in self.residual_history] if h0 else list(self.residual_history)


class FunctionPreconditioner:
    """Wrap a callable v -> M^{-1} v as a Preconditioner."""

    def __init__(self, fn):
        self._fn = fn

    def apply(self, v):
        return self._fn(v)


class DiagonalPreconditioner:
    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=np.float64)
        if np.any(self.diag == 0):
            raise ValueError("diagonal preconditioner must be nonsingular")

    def apply(self, v):
        return v / self.diag


class DenseSolvePreconditioner:
    """Apply M^{-1} through a cached dense inverse (desk scale only)."""

    def __init__(self, M):
        self._inv = np.linalg.inv(np.asarray(M, dtype=np.float64))

    def apply(self, v):
        return self._inv @ v


def _apply_precond(M, v):
    if M is None:
        return v
    if hasattr(M, "apply"):
        return M.apply(v)
    return M(v)


def backward_error(A, x, b):
    """Normwise backward error ||b - A x|| / (||A|| ||x|| + ||b||)."""
    matvec, _ = as_matvec(A, n=len(b))
    r = np.asarray(b, dtype=np.float64) - matvec(np.asarray(x, dtype=np.float64))
    anorm = operator_norm_estimate(A, matvec, probe=np.asarray(b, dtype=np.float64))
    denom = anorm * np.linalg.norm(x) + np.linalg.norm(b)
    if denom == 0.0:
        return float(np.linalg.norm(r))
    return float(np.linalg.norm(r) / denom)


# ---------------------------------------------------------------------------
# Shared bookkeeping


class _Tally:
    """Matvec counting wrapper plus the reduction counter for one solve."""

    def __init__(self, matvec):
        self.base = matvec
        self.matvecs = 0
        self.counter = ReductionCounter()

    def __call__(self, v):
        self.matvecs += 1
        return self.base(v)


def _zero_rhs_report(N, dtype=np.float64):
    return SolveReport(x=np.zeros(N, dtype=dtype), residual_history=[0.0],
                       iterations=0, termination="converged")


def _reject_precond(opts, name):
    if opts.precond_side != "none":
        raise ValueError(f"{name} does not support one-sided preconditioning; "
                         "precondition the operator explicitly")


def _reject_weight(opts, name):
    if opts.weight is not None:
        raise ValueError(f"{name} does not support a weighted inner product")


def _weighted_norm(v, weight):
    if weight is None:
        return float(np.linalg.norm(v))
    return float(math.sqrt(abs(np.dot(v, weight * v))))


# ---------------------------------------------------------------------------
# Arnoldi-based cycle shared by gmres / weighted / restarted / two-precision


def _gmres_cycle(op, r0, m, tol_abs, opts, tally, *, weight=None, dtype=None,
                 iter_offset=0, tol_ref=1.0):
    """Run one (restart) cycle of Arnoldi + Givens; returns cycle results.

    status is one of converged / exhausted / breakdown.  rhos holds the
    per-iteration residual estimates of this cycle (excluding the entry rho).
    """
    proc = ArnoldiProcess(op, r0, m, opts.scheme, weight=weight,
                          counter=tally.counter, dtype=dtype,
                          breakdown_rel=opts.breakdown_rel)
    ls = HessenbergLsState(proc.max_steps, proc.beta, dtype=proc.dtype)
    rhos = []
    status = "exhausted"

    def _push_through(limit):
        nonlocal status
        for c in range(ls.ncols, limit):
            rho = ls.push_column(proc.H[: c + 2, c])
            rhos.append(rho)
            tally.counter.mark()
            if opts.iteration_callback is not None:
                opts.iteration_callback(iter_offset + len(rhos), rho / tol_ref)
            if rho <= tol_abs:
                status = "converged"
                return

    while proc.steps < proc.max_steps:
        try:
            proc.step()
        except OrthogonalizationBreakdown:
            # instability breakdown is a reported exit at the solver level
            status = "breakdown"
            break
        _push_through(proc.completed)
        if status == "converged":
            break
        if proc.breakdown_at is not None:
            status = "breakdown"
            break
    if status == "exhausted" and proc.completed < proc.steps:
        proc.finish()  # deferred ICWY normalization completes the last column
        _push_through(proc.completed)
        if status != "converged" and proc.breakdown_at is not None:
            status = "breakdown"
    n = ls.ncols
    y = ls.solve(n) if n else np.zeros(0, dtype=proc.dtype)
    update = proc.V[:, :n] @ y if n else np.zeros(proc.N, dtype=proc.dtype)
    return update, rhos, status, proc, ls


def _finalize_restarts(x, history, status, *, opts, tally, restarts, checkpoints,
                       est_checkpoints, diagnostics):
    termination = {"converged": "converged", "breakdown": "breakdown",
                   "exhausted": "maxiter", "stagnation": "stagnation"}[status]
    return SolveReport(
        x=x,
        residual_history=history,
        iterations=len(history) - 1,
        termination=termination,
        restarts=restarts,
        reductions=tally.counter.total,
        matvecs=tally.matvecs,
        true_residual_checkpoints=checkpoints,
        estimated_norm_checkpoints=est_checkpoints,
        reduction_log=list(tally.counter.per_step),
        reduction_marks=list(tally.counter.marks),
        diagnostics=diagnostics,
    )


def gmres(A, b, x0=None, opts=None):
    """Minimal-residual iteration over the Krylov space of A (GMRES).

    Builds an orthonormal Krylov basis with the configured Gram-Schmidt
    scheme, keeps a running QR of the Hessenberg factor through Givens
    rotations (which yields the residual-norm estimate for free), and exits
    when that estimate drops below rtol * ||b||.

    Parameters
    ----------
    A : CsrMatrix, ndarray or callable
        Square operator; callables receive and return length-N vectors.
    b : ndarray
        Right-hand side. A zero b short-circuits to x = 0.
    x0 : ndarray, optional
        Initial iterate (zeros by default).
    opts : GmresOptions, optional
        Tolerance, iteration/restart limits, orthogonalization scheme,
        preconditioning side, and the optional diagonal weight.

    Returns
    -------
    SolveReport
        Iterate, per-iteration residual estimates, explicit residual
        checkpoints, matvec/reduction counters, and termination reason
        (converged, maxiter, breakdown, or stagnation).

    Notes
    -----
    With precond_side "right" the history holds true residual norms and the
    final update is mapped back through the preconditioner; with "left" the
    history holds preconditioned residual norms while the checkpoints always
    record the true ones. Happy breakdown (an invariant Krylov subspace)
    surfaces as convergence at the grade.
    """
    opts = opts if opts is not None else GmresOptions()
    return _restarted_engine(A, b, x0, opts)


def gmres_restarted(A, b, x0=None, opts=None):
    """Restarted GMRES(m); each cycle ends with an explicit residual recompute."""
    opts = opts if opts is not None else GmresOptions(restart=30)
    if opts.restart is None:
        raise ValueError("gmres_restarted needs opts.restart")
    return _restarted_engine(A, b, x0, opts)


def _restarted_engine(A, b, x0, opts, *, policy=None):
    """Driver for full and restarted GMRES, shared with the two-precision path.

    policy of None runs everything in binary64; a PrecisionPolicy with
    working=Low runs the inner cycles in the low format while residuals and
    solution updates stay in binary64 (the same code path, so an all-High
    policy reproduces the plain run bit for bit).
    """
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    weight = opts.weight
    refresh_weight = bool(getattr(opts, "_weight_refresh", False))

    work_low = policy is not None and policy.is_low("working")
    if work_low:
        from .mixedprec import low_operator
        low_matvec = low_operator(A, policy.dtype_of("working"), n=N)

        def base_matvec(v):
            tally.matvecs += 1
            return low_matvec(v)
    else:
        base_matvec = tally
    work_dtype = policy.dtype_of("working") if policy is not None else np.float64

    M = opts.preconditioner
    side = opts.precond_side
    if side == "right":
        cycle_matvec = lambda v: base_matvec(_apply_precond(M, v))
    elif side == "left":
        cycle_matvec = lambda v: _apply_precond(M, base_matvec(v))
    else:
        cycle_matvec = base_matvec

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)

    def precond_residual(r):
        return _apply_precond(M, r) if side == "left" else r

    r_true = b - tally(x)
    r = precond_residual(r_true)
    if side == "left":
        tol_ref = _weighted_norm(precond_residual(b), weight)
    else:
        tol_ref = _weighted_norm(b, weight)
    tol_abs = opts.rtol * tol_ref

    max_iter = opts.max_iter if opts.max_iter is not None else N
    m = opts.restart if opts.restart is not None else max_iter

    history = [_weighted_norm(r, weight)]
    checkpoints = []
    est_checkpoints = []
    diagnostics = {}
    restarts = 0
    total_iter = 0
    status = "exhausted"
    if history[0] <= tol_abs:
        status = "converged"
        checkpoints.append((0, float(np.linalg.norm(r_true))))
        est_checkpoints.append((0, history[0]))

    while status != "converged":
        if refresh_weight:
            weight = _essai_weights(r)
            tol_ref = _weighted_norm(b, weight)
            tol_abs = opts.rtol * tol_ref
        budget = min(m, max_iter - total_iter)
        if budget <= 0:
            status = "exhausted"
            break
        rho_start = history[-1]
        cycle_r = np.asarray(r, dtype=work_dtype)
        update, rhos, status, proc, ls = _gmres_cycle(
            cycle_matvec, cycle_r, budget, tol_abs, opts, tally, weight=weight,
            dtype=work_dtype, iter_offset=total_iter, tol_ref=tol_ref)
        update = np.asarray(update, dtype=np.float64)
        if side == "right":
            update = _apply_precond(M, update)
        x = x + update
        history.extend(rhos)
        total_iter += len(rhos)
        diagnostics["arnoldi"] = proc.decomposition()
        diagnostics["hessenberg_beta"] = proc.beta

        r_true = b - tally(x)
        r = precond_residual(r_true)
        rho_true = _weighted_norm(r, weight)
        checkpoints.append((total_iter, float(np.linalg.norm(r_true))))
        est_checkpoints.append((total_iter, rho_true))
        if status == "converged" or rho_true <= tol_abs:
            status = "converged"
            break
        if status == "breakdown":
            break
        if total_iter >= max_iter:
            status = "exhausted"
            break
        # the next cycle restarts from the explicit residual
        if rho_true >= rho_start * (1.0 - opts.stagnation_rel):
            status = "stagnation"
            break
        restarts += 1

    return _finalize_restarts(x, history, status, opts=opts, tally=tally,
                              restarts=restarts, checkpoints=checkpoints,
                              est_checkpoints=est_checkpoints,
                              diagnostics=diagnostics)


def _cycle_driver(A, b, x0, opts, cycle_fn, diagnostics=None):
    """Restart skeleton shared by solvers with bespoke cycles.

    cycle_fn(tally, r, budget, tol_abs, total_iter) -> (update, rhos, status)
    runs one cycle from the residual r and returns the additive correction.
    """
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    diagnostics = diagnostics if diagnostics is not None else {}
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)
    tol_abs = opts.rtol * bnorm
    max_iter = opts.max_iter if opts.max_iter is not None else N
    m = opts.restart if opts.restart is not None else max_iter

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - tally(x)
    history = [float(np.linalg.norm(r))]
    checkpoints = []
    restarts = 0
    total_iter = 0
    status = "exhausted"
    if history[0] <= tol_abs:
        return _finalize_restarts(x, history, "converged", opts=opts, tally=tally,
                                  restarts=0, checkpoints=[(0, history[0])],
                                  est_checkpoints=[(0, history[0])],
                                  diagnostics=diagnostics)
    while True:
        budget = min(m, max_iter - total_iter)
        if budget <= 0:
            break
        rho_start = history[-1]
        update, rhos, status = cycle_fn(tally, r, budget, tol_abs, total_iter)
        x = x + update
        history.extend(rhos)
        total_iter += len(rhos)
        r = b - tally(x)
        rho_true = float(np.linalg.norm(r))
        checkpoints.append((total_iter, rho_true))
        if status == "converged" or rho_true <= tol_abs:
            status = "converged"
            break
        if status == "breakdown" or total_iter >= max_iter:
            break
        if rho_true >= rho_start * (1.0 - opts.stagnation_rel):
            status = "stagnation"
            break
        restarts += 1
    return _finalize_restarts(x, history, status, opts=opts, tally=tally,
                              restarts=restarts, checkpoints=checkpoints,
                              est_checkpoints=list(checkpoints),
                              diagnostics=diagnostics)


def _essai_weights(r):
    """Essai's restart weights sqrt(N) |r_i| / ||r||, clamped away from zero."""
    r = np.asarray(r, dtype=np.float64)
    nrm = np.linalg.norm(r)
    if nrm == 0.0:
        return np.ones(len(r))
    w = math.sqrt(len(r)) * np.abs(r) / nrm
    return np.maximum(w, 1e-10)


def weighted_gmres(A, b, x0=None, opts=None):
    """GMRES in the D-inner product.

    With an explicit opts.weight the diagonal stays fixed; without one the
    weights follow the residual at every restart (Essai's rule), clamped
    below at 1e-10.
    """
    opts = opts if opts is not None else GmresOptions()
    if opts.weight is None:
        b_arr = np.asarray(b, dtype=np.float64)
        x_arr = np.zeros_like(b_arr) if x0 is None else np.asarray(x0, dtype=np.float64)
        matvec, _ = as_matvec(A, n=len(b_arr))
        r0 = b_arr - matvec(x_arr)
        opts = _clone_options(opts, weight=_essai_weights(r0))
        opts._weight_refresh = True
    return _restarted_engine(A, b, x0, opts)


def _clone_options(opts, **overrides):
    fields = dict(
        rtol=opts.rtol, max_iter=opts.max_iter, restart=opts.restart,
        scheme=opts.scheme, precond_side=opts.precond_side,
        preconditioner=opts.preconditioner, weight=opts.weight,
        simpler_omega=opts.simpler_omega, breakdown_rel=opts.breakdown_rel,
        stagnation_rel=opts.stagnation_rel,
        iteration_callback=opts.iteration_callback,
    )
    fields.update(overrides)
    return GmresOptions(**fields)


# ---------------------------------------------------------------------------
# Householder GMRES


def hh_gmres(A, b, x0=None, opts=None):
    """GMRES with Householder-reflector orthogonalization.

    The solution update evaluates V_n y through the recursive reflector
    product rather than storing the basis.
    """
    opts = opts if opts is not None else GmresOptions()
    _reject_weight(opts, "hh_gmres")
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)

    M = opts.preconditioner
    side = opts.precond_side
    if side == "right":
        cycle_matvec = lambda v: tally(_apply_precond(M, v))
    elif side == "left":
        cycle_matvec = lambda v: _apply_precond(M, tally(v))
    else:
        cycle_matvec = tally
    precond_residual = (lambda r: _apply_precond(M, r)) if side == "left" \
        else (lambda r: r)

    tol_ref = float(np.linalg.norm(precond_residual(b)))
    tol_abs = opts.rtol * tol_ref
    max_iter = opts.max_iter if opts.max_iter is not None else N
    m = opts.restart if opts.restart is not None else max_iter

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r_true = b - tally(x)
    r = precond_residual(r_true)
    history = [float(np.linalg.norm(r))]
    checkpoints = []
    est_checkpoints = []
    restarts = 0
    total_iter = 0
    status = "exhausted"
    if history[0] <= tol_abs:
        return _finalize_restarts(x, history, "converged", opts=opts, tally=tally,
                                  restarts=0, checkpoints=[(0, history[0])],
                                  est_checkpoints=[(0, history[0])],
                                  diagnostics={})

    while True:
        budget = min(m, max_iter - total_iter)
        if budget <= 0:
            break
        rho_start = history[-1]
        proc = HouseholderArnoldi(cycle_matvec, r, budget, counter=tally.counter,
                                  breakdown_rel=opts.breakdown_rel, n=N)
        ls = HessenbergLsState(proc.max_steps, proc.beta)
        rhos = []
        cycle_status = "exhausted"
        while proc.steps < proc.max_steps:
            proc.step()
            c = proc.completed - 1
            rho = ls.push_column(proc.H[: c + 2, c])
            rhos.append(rho)
            tally.counter.mark()
            if opts.iteration_callback is not None:
                opts.iteration_callback(total_iter + len(rhos), rho / tol_ref)
            if rho <= tol_abs:
                cycle_status = "converged"
                break
            if proc.breakdown_at is not None:
                cycle_status = "breakdown"
                break
        n = ls.ncols
        if n:
            y = ls.solve(n)
            update = proc.eval_basis_combination(y)
            if side == "right":
                update = _apply_precond(M, update)
            x = x + update
        history.extend(rhos)
        total_iter += len(rhos)
        r_true = b - tally(x)
        r = precond_residual(r_true)
        rho_true = float(np.linalg.norm(r))
        checkpoints.append((total_iter, float(np.linalg.norm(r_true))))
        est_checkpoints.append((total_iter, rho_true))
        status = cycle_status
        if cycle_status == "converged" or rho_true <= tol_abs:
            status = "converged"
            break
        if cycle_status == "breakdown" or total_iter >= max_iter:
            break
        if rho_true >= rho_start * (1.0 - opts.stagnation_rel):
            status = "stagnation"
            break
        restarts += 1

    diagnostics = {"arnoldi": proc.decomposition(), "hessenberg_beta": proc.beta}
    return _finalize_restarts(x, history, status, opts=opts, tally=tally,
                              restarts=restarts, checkpoints=checkpoints,
                              est_checkpoints=est_checkpoints,
                              diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Simpler GMRES family


def simpler_gmres(A, b, x0=None, opts=None, variant="adaptive"):
    """Generalized simpler GMRES: AZ_n = V_n T_n with T_n upper triangular.

    variant selects the next direction z_n: "sgmres" always reuses v_{n-1},
    "rb" the normalized running residual, and "adaptive" switches on the
    one-step residual decrease factor omega.
    """
    if variant not in ("sgmres", "rb", "adaptive"):
        raise ValueError("variant must be sgmres, rb or adaptive")
    opts = opts if opts is not None else GmresOptions()
    _reject_precond(opts, "simpler_gmres")
    _reject_weight(opts, "simpler_gmres")
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)
    tol_abs = opts.rtol * bnorm
    max_iter = opts.max_iter if opts.max_iter is not None else N
    omega = opts.simpler_omega if variant == "adaptive" else \
        (1.0 if variant == "rb" else 0.0)

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - tally(x)
    history = [float(np.linalg.norm(r))]
    if history[0] <= tol_abs:
        return _finalize_restarts(x, history, "converged", opts=opts, tally=tally,
                                  restarts=0, checkpoints=[(0, history[0])],
                                  est_checkpoints=[(0, history[0])],
                                  diagnostics={"kappa_z": 1.0})
    V = np.zeros((N, max_iter))
    Z = np.zeros((N, max_iter))
    T = np.zeros((max_iter, max_iter))
    alpha = np.zeros(max_iter)
    status = "exhausted"
    rho_prev2 = None  # ||r_{n-2}||
    n = 0

    for j in range(max_iter):
        rho_prev = history[-1]
        if j == 0:
            z = r / rho_prev
        elif rho_prev <= omega * (rho_prev2 if rho_prev2 is not None else np.inf):
            z = r / rho_prev
        else:
            z = V[:, j - 1]
        w = tally(z)
        # MGS orthonormalization of w against v_1..v_{j-1}
        for i in range(j):
            T[i, j] = float(w @ V[:, i])
            tally.counter.count()
            w = w - T[i, j] * V[:, i]
        t_jj = float(np.linalg.norm(w))
        tally.counter.count()
        tnorm = max(np.abs(np.diag(T)[: j + 1]).max(), t_jj)
        if t_jj <= opts.breakdown_rel * tnorm:
            status = "breakdown"
            break
        T[j, j] = t_jj
        V[:, j] = w / t_jj
        Z[:, j] = z
        alpha[j] = float(r @ V[:, j])
        tally.counter.count()
        r = r - alpha[j] * V[:, j]
        rho = float(np.linalg.norm(r))
        tally.counter.count()
        rho_prev2 = rho_prev
        history.append(rho)
        tally.counter.mark()
        n = j + 1
        if opts.iteration_callback is not None:
            opts.iteration_callback(n, rho / bnorm)
        if rho <= tol_abs:
            status = "converged"
            break

    if n:
        y = back_substitute(T[:n, :n], alpha[:n])
        x = x + Z[:, :n] @ y
    rho_true = float(np.linalg.norm(b - tally(x)))
    diagnostics = {"kappa_z": float(np.linalg.cond(Z[:, :n])) if n else 1.0}
    return _finalize_restarts(
        x, history, "converged" if status == "converged" else status,
        opts=opts, tally=tally, restarts=0,
        checkpoints=[(n, rho_true)], est_checkpoints=[(n, rho_true)],
        diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# GCR and ORTHODIR


def _gcr_like(A, b, x0, opts, direction_rule):
    opts = opts if opts is not None else GmresOptions()
    _reject_precond(opts, "gcr/orthodir")
    _reject_weight(opts, "gcr/orthodir")
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)
    tol_abs = opts.rtol * bnorm
    max_iter = opts.max_iter if opts.max_iter is not None else N
    anorm = operator_norm_estimate(A, matvec, probe=b)

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - tally(x)
    history = [float(np.linalg.norm(r))]
    qs = []      # search directions q_i
    aqs = []     # their images A q_i
    aq_sq = []   # (A q_i, A q_i)
    status = "exhausted"
    diagnostics = {}
    if history[0] <= tol_abs:
        return _finalize_restarts(x, history, "converged", opts=opts, tally=tally,
                                  restarts=0, checkpoints=[(0, history[0])],
                                  est_checkpoints=[(0, history[0])],
                                  diagnostics=diagnostics)

    q = r.copy()
    aq = tally(q)
    for j in range(max_iter):
        qs.append(q)
        aqs.append(aq)
        denom = float(aq @ aq)
        tally.counter.count()
        aq_sq.append(denom)
        if denom <= 1e-28 * anorm * anorm:
            status = "breakdown"
            diagnostics["breakdown_reason"] = "indefinite symmetric part"
            break
        alpha = float(r @ aq) / denom
        tally.counter.count()
        x = x + alpha * q
        r = r - alpha * aq
        rho = float(np.linalg.norm(r))
        tally.counter.count()
        history.append(rho)
        tally.counter.mark()
        if opts.iteration_callback is not None:
            opts.iteration_callback(j + 1, rho / bnorm)
        if rho <= tol_abs:
            status = "converged"
            break
        # next direction: seed w and its image A w, then A-orthogonalize
        seed, aseed = direction_rule(tally, r, aqs[-1])
        betas = [-float(aseed @ aqs[i]) / aq_sq[i] for i in range(len(qs))]
        tally.counter.count()
        q = seed + sum(bk * qk for bk, qk in zip(betas, qs))
        aq = aseed + sum(bk * aqk for bk, aqk in zip(betas, aqs))

    rho_true = float(np.linalg.norm(b - tally(x)))
    n = len(history) - 1
    return _finalize_restarts(x, history, status, opts=opts, tally=tally,
                              restarts=0, checkpoints=[(n, rho_true)],
                              est_checkpoints=[(n, rho_true)],
                              diagnostics=diagnostics)


def gcr(A, b, x0=None, opts=None):
    """Generalized conjugate residuals; requires a definite symmetric part for
    guaranteed progress, and reports a breakdown diagnostic otherwise."""

    def rule(tally, r, aq_last):
        ar = tally(r)
        return r, ar

    return _gcr_like(A, b, x0, opts, rule)


def orthodir(A, b, x0=None, opts=None):
    """ORTHODIR: same projection as GCR with directions grown from A q_j."""

    def rule(tally, r, aq_last):
        a2q = tally(aq_last)
        return aq_last, a2q

    return _gcr_like(A, b, x0, opts, rule)


# ---------------------------------------------------------------------------
# Flexible and augmented cycles (FGMRES / LGMRES / GMRES-E)


def _flexible_cycle(tally, r0, m, tol_abs, opts, direction_fn, *, iter_offset=0,
                    tol_ref=1.0):
    """One MGS cycle where step j expands the basis with A applied to an
    arbitrary direction z_j.

    direction_fn(j, slot, V) -> (z, kind) or None; j is the basis step about
    to be performed, slot the position in the operand schedule (they drift
    apart when "aug" columns project to zero and are dropped as
    rank-deficient).  A vanishing subdiagonal on a "krylov" direction ends the
    cycle: exact convergence when the flexible Hessenberg matrix is regular,
    FgmresBreakdownError otherwise.
    """
    N = len(r0)
    beta = float(np.linalg.norm(r0))
    tally.counter.count()
    V = np.zeros((N, m + 1))
    H = np.zeros((m + 1, m))
    Z = np.zeros((N, m))
    V[:, 0] = r0 / beta
    ls = HessenbergLsState(m, beta)
    rhos = []
    dropped = 0
    status = "exhausted"
    j = 0
    slot = 0
    while j < m:
        got = direction_fn(j, slot, V)
        slot += 1
        if got is None:
            break
        z, kind = got
        w = tally(z)
        tally.counter.begin_step()
        h = np.zeros(j + 1)
        for i in range(j + 1):
            h[i] = float(w @ V[:, i])
            tally.counter.count()
            w = w - h[i] * V[:, i]
        h_sub = float(np.linalg.norm(w))
        tally.counter.count()
        tally.counter.end_step()
        col_scale = math.sqrt(float(h @ h) + h_sub * h_sub)
        if h_sub <= opts.breakdown_rel * col_scale:
            if kind == "aug":
                dropped += 1
                continue
            # krylov direction: invariant subspace reached
            H[: j + 1, j] = h
            H[j + 1, j] = 0.0
            Z[:, j] = z
            rho = ls.push_column(H[: j + 2, j])
            rhos.append(rho)
            tally.counter.mark()
            if abs(ls.diag(j)) <= opts.breakdown_rel * col_scale:
                raise FgmresBreakdownError(
                    "h_{j+1,j} vanished with a singular Hessenberg matrix")
            j += 1
            status = "converged" if rho <= tol_abs else "breakdown"
            break
        H[: j + 1, j] = h
        H[j + 1, j] = h_sub
        V[:, j + 1] = w / h_sub
        Z[:, j] = z
        rho = ls.push_column(H[: j + 2, j])
        rhos.append(rho)
        tally.counter.mark()
        j += 1
        if opts.iteration_callback is not None:
            opts.iteration_callback(iter_offset + len(rhos), rho / tol_ref)
        if rho <= tol_abs:
            status = "converged"
            break
    n = ls.ncols
    y = ls.solve(n) if n else np.zeros(0)
    update = Z[:, :n] @ y if n else np.zeros(N)
    return update, rhos, status, V, H[:, :n], Z[:, :n], dropped


def fgmres(A, b, x0=None, opts=None, precond_sequence=None):
    """Flexible GMRES: the preconditioner may change at every step.

    precond_sequence is a callable (j, v) -> M_j^{-1} v, a sequence of
    Preconditioner objects cycled per step, or None for the identity.
    """
    opts = opts if opts is not None else GmresOptions()
    _reject_precond(opts, "fgmres")  # the sequence argument is the mechanism
    _reject_weight(opts, "fgmres")
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)
    tol_abs = opts.rtol * bnorm
    max_iter = opts.max_iter if opts.max_iter is not None else N
    m = opts.restart if opts.restart is not None else max_iter

    if precond_sequence is None:
        apply_mj = lambda j, v: v
    elif callable(precond_sequence) and not hasattr(precond_sequence, "apply"):
        apply_mj = precond_sequence
    else:
        seq = list(precond_sequence) if not hasattr(precond_sequence, "apply") \
            else [precond_sequence]
        apply_mj = lambda j, v: _apply_precond(seq[j % len(seq)], v)

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - tally(x)
    history = [float(np.linalg.norm(r))]
    checkpoints = []
    restarts = 0
    total_iter = 0
    status = "exhausted"
    diagnostics = {}
    if history[0] <= tol_abs:
        return _finalize_restarts(x, history, "converged", opts=opts, tally=tally,
                                  restarts=0, checkpoints=[(0, history[0])],
                                  est_checkpoints=[(0, history[0])],
                                  diagnostics=diagnostics)

    while True:
        budget = min(m, max_iter - total_iter)
        if budget <= 0:
            break
        rho_start = history[-1]

        def direction(j, slot, V, base=total_iter):
            return apply_mj(base + j, V[:, j]), "krylov"

        update, rhos, status, V, H, Z, _ = _flexible_cycle(
            tally, r, budget, tol_abs, opts, direction,
            iter_offset=total_iter, tol_ref=bnorm)
        x = x + update
        history.extend(rhos)
        total_iter += len(rhos)
        diagnostics["flexible_basis"] = (V[:, : len(rhos) + 1], H, Z)
        r = b - tally(x)
        rho_true = float(np.linalg.norm(r))
        checkpoints.append((total_iter, rho_true))
        if status == "converged" or rho_true <= tol_abs:
            status = "converged"
            break
        if status == "breakdown" or total_iter >= max_iter:
            break
        if rho_true >= rho_start * (1.0 - opts.stagnation_rel):
            status = "stagnation"
            break
        restarts += 1

    return _finalize_restarts(x, history, status, opts=opts, tally=tally,
                              restarts=restarts, checkpoints=checkpoints,
                              est_checkpoints=list(checkpoints),
                              diagnostics=diagnostics)


def lgmres(A, b, x0=None, m1=20, m2=3, opts=None):
    """LGMRES(m1, m2): restarted GMRES augmented with the previous error
    approximations, which damps the alternating behavior of plain GMRES(m).

    The u vectors are kept unnormalized; each cycle's search space is spanned
    by the recorded directions so that A Z_m = V_{m+1} Hbar_m holds column by
    column.
    """
    if m1 < 1 or m2 < 0:
        raise ValueError("need m1 >= 1 and m2 >= 0")
    opts = opts if opts is not None else GmresOptions()
    _reject_precond(opts, "lgmres")
    _reject_weight(opts, "lgmres")
    b = np.asarray(b, dtype=np.float64)
    N = len(b)
    matvec, _ = as_matvec(A, n=N)
    tally = _Tally(matvec)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return _zero_rhs_report(N)
    tol_abs = opts.rtol * bnorm
    m = m1 + m2
    max_iter = opts.max_iter if opts.max_iter is not None else max(N, m)

    x = np.zeros(N) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    r = b - tally(x)
    history = [float(np.linalg.norm(r))]
    checkpoints = []
    us = []  # u_1, u_2, ... error approximations
    total_iter = 0
    restarts = 0
    status = "exhausted"
    k = 0
    if history[0] <= tol_abs:
        return _finalize_restarts(x, history, "converged", opts=opts, tally=tally,
                                  restarts=0, checkpoints=[(0, history[0])],
                                  est_checkpoints=[(0, history[0])],
                                  diagnostics={"augmented_cycles": 0})

    while total_iter < max_iter:
        rho_start = history[-1]
        budget = min(m, max_iter - total_iter)

        def direction(j, slot, V, k=k):
            # Krylov step unless the slot falls in the augmentation window
            # m1 < slot+1 <= m1 + k, which replays the newest corrections
            if slot < m1 or slot - m1 >= k:
                return V[:, j], "krylov"
            return us[k - 1 - (slot - m1)], "aug"

        update, rhos, status, V, H, Z, dropped = _flexible_cycle(
            tally, r, budget, tol_abs, opts, direction,
            iter_offset=total_iter, tol_ref=bnorm)
        us.append(update)
        x = x + update
        history.extend(rhos)
        total_iter += len(rhos)
        r = b - tally(x)
        rho_true = float(np.linalg.norm(r))
        checkpoints.append((total_iter, rho_true))
        if status == "converged" or rho_true <= tol_abs:
            status = "converged"
            break
        if status == "breakdown" or total_iter >= max_iter:
            break
        if rho_true >= rho_start * (1.0 - opts.stagnation_rel):
            status = "stagnation"
            break
        restarts += 1
        k += 1

    return _finalize_restarts(x, history, status, opts=opts, tally=tally,
                              restarts=restarts, checkpoints=checkpoints,
                              est_checkpoints=list(checkpoints),
                              diagnostics={"augmented_cycles": k})
