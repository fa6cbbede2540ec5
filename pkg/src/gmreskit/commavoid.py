"""Communication-avoiding machinery: polynomial Krylov bases, TSQR, block
Gram-Schmidt, and the s-step / pipelined / low-sync GMRES variants.

Everything runs in one process; communication shows up only in the modeled
global-reduction counters (one reduction = one batch of simultaneously
computable inner products, one TSQR tree = one reduction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .deflation import leja_order
from .linalg import HessenbergLsState, as_matvec, householder_qr
from .ortho import OrthoScheme, arnoldi
from .solvers import (GmresOptions, _clone_options, _cycle_driver,
                      _reject_precond, _reject_weight, _restarted_engine)
from .linalg import dense_eig_general

__all__ = [
    "MonomialBasis",
    "NewtonBasis",
    "ChebyshevBasis",
    "BasisConversion",
    "BasisCollapseError",
    "SstepBlockError",
    "TsqrTree",
    "build_basis",
    "tsqr",
    "bgs_project",
    "warmup_ritz_values",
    "newton_basis_from_warmup",
    "chebyshev_basis_from_warmup",
    "sstep_gmres",
    "pipelined_gmres",
    "lowsync_gmres",
]


class BasisCollapseError(RuntimeError):
    """A polynomial basis column under/overflowed; use a smaller s or a
    better-conditioned basis."""


class SstepBlockError(RuntimeError):
    """The block triangular factor became singular away from convergence;
    use a smaller s or a better basis."""


@dataclass(frozen=True)
class MonomialBasis:
    """phi_j(z) = z^j."""


@dataclass(frozen=True)
class NewtonBasis:
    """phi_j(z) = rho_j (z - theta_j) phi_{j-1}(z) with conjugate-closed shifts.

    Complex shifts must come in adjacent conjugate pairs (modified Leja order
    does this); each pair is realized in real arithmetic through its
    quadratic factor.
    """

    shifts: tuple
    scalings: tuple = None

    def __post_init__(self):
        shifts = tuple(complex(s) for s in self.shifts)
        object.__setattr__(self, "shifts", shifts)
        i = 0
        while i < len(shifts):
            if shifts[i].imag != 0.0:
                if i + 1 >= len(shifts) or \
                        abs(shifts[i + 1] - shifts[i].conjugate()) > \
                        1e-10 * max(1.0, abs(shifts[i])):
                    raise ValueError("complex shifts must form adjacent conjugate pairs")
                i += 2
            else:
                i += 1
        if self.scalings is not None:
            sc = tuple(float(s) for s in self.scalings)
            if len(sc) != len(shifts):
                raise ValueError("one scaling per shift required")
            if any(s <= 0 for s in sc):
                raise ValueError("scalings must be positive")
            object.__setattr__(self, "scalings", sc)


@dataclass(frozen=True)
class ChebyshevBasis:
    """Three-term Chebyshev basis for a spectrum inside the rectangle
    |Re z - center| <= xi1, |Im z| <= xi2."""

    center: float
    xi1: float
    xi2: float

    def __post_init__(self):
        if max(self.xi1, self.xi2) <= 0:
            raise ValueError("rectangle half-widths must give gamma > 0")

    @property
    def gamma(self):
        return max(self.xi1, self.xi2)

    @property
    def tau_sq(self):
        return self.xi1 ** 2 - self.xi2 ** 2


@dataclass(frozen=True)
class BasisConversion:
    """Banded matrix Bbar with A W_s = W_{s+1} Bbar."""

    Bbar: np.ndarray


def _check_column(w, prev_mag, scale):
    # max-magnitude detector: squared 2-norms underflow long before entries do
    mag = float(np.max(np.abs(w))) if len(w) else 0.0
    if not np.isfinite(mag):
        raise BasisCollapseError(
            "basis column overflowed; use a smaller s or a scaled basis")
    # an exactly annihilated column out of a healthy one is a grade signal
    # handled downstream; a zero out of an already-denormal column is a
    # genuine underflow of the recurrence
    if mag == 0.0 and 0.0 < prev_mag < 1e-200 * max(scale, 1.0):
        raise BasisCollapseError(
            "basis column norm underflowed; use a smaller s or a scaled basis")
    return mag


def build_basis(A, start, s, spec=None):
    """Generate s+1 polynomial-basis vectors and the conversion matrix.

    Columns follow the monomial / Newton / Chebyshev recurrences; the
    returned pair (W, conversion) satisfies A W[:, :s] = W conversion.Bbar.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    spec = spec if spec is not None else MonomialBasis()
    matvec, N = as_matvec(A, n=len(start))
    W = np.zeros((N, s + 1))
    W[:, 0] = np.asarray(start, dtype=np.float64)
    B = np.zeros((s + 1, s))
    scale = float(np.linalg.norm(W[:, 0]))
    prev = scale
    if isinstance(spec, MonomialBasis):
        for k in range(s):
            W[:, k + 1] = matvec(W[:, k])
            B[k + 1, k] = 1.0
            prev = _check_column(W[:, k + 1], prev, scale)
    elif isinstance(spec, NewtonBasis):
        shifts = list(spec.shifts)
        if len(shifts) < s:
            raise ValueError(f"need at least {s} shifts, got {len(shifts)}")
        scalings = list(spec.scalings) if spec.scalings is not None else [1.0] * s
        k = 0
        while k < s:
            th = shifts[k]
            if th.imag == 0.0 or k == s - 1:
                # a pair straddling the end degrades to its real part
                a = th.real
                W[:, k + 1] = scalings[k] * (matvec(W[:, k]) - a * W[:, k])
                B[k, k] = a
                B[k + 1, k] = 1.0 / scalings[k]
                prev = _check_column(W[:, k + 1], prev, scale)
                k += 1
            else:
                a, bb = th.real, th.imag
                rk, rk1 = scalings[k], scalings[k + 1]
                W[:, k + 1] = rk * (matvec(W[:, k]) - a * W[:, k])
                prev = _check_column(W[:, k + 1], prev, scale)
                W[:, k + 2] = rk1 * ((matvec(W[:, k + 1]) - a * W[:, k + 1])
                                     + (bb * bb * rk) * W[:, k])
                prev = _check_column(W[:, k + 2], prev, scale)
                B[k, k] = a
                B[k + 1, k] = 1.0 / rk
                B[k, k + 1] = -bb * bb * rk
                B[k + 1, k + 1] = a
                B[k + 2, k + 1] = 1.0 / rk1
                k += 2
    elif isinstance(spec, ChebyshevBasis):
        zeta, gamma, tau_sq = spec.center, spec.gamma, spec.tau_sq
        for k in range(s):
            t = matvec(W[:, k]) - zeta * W[:, k]
            if k == 0:
                W[:, 1] = t / (2.0 * gamma)
                B[0, 0] = zeta
                B[1, 0] = 2.0 * gamma
            else:
                W[:, k + 1] = (t - (tau_sq / (4.0 * gamma)) * W[:, k - 1]) / gamma
                B[k - 1, k] = tau_sq / (4.0 * gamma)
                B[k, k] = zeta
                B[k + 1, k] = gamma
            prev = _check_column(W[:, k + 1], prev, scale)
    else:
        raise TypeError(f"unknown basis spec {type(spec).__name__}")
    return W, BasisConversion(Bbar=B)


# ---------------------------------------------------------------------------
# TSQR


@dataclass
class _TsqrNode:
    Q: np.ndarray | None            # None marks an odd-count passthrough
    children: tuple = ()

    def assemble(self, C):
        if self.Q is None:
            return self.children[0].assemble(C)
        if not self.children:
            return self.Q @ C
        s = C.shape[0]
        M = self.Q @ C
        left, right = self.children
        return np.vstack([left.assemble(M[:s]), right.assemble(M[s:])])


@dataclass
class TsqrTree:
    """Tree-structured QR of a tall-skinny matrix.

    The final R carries a nonnegative diagonal (sign-fixed); the implicit Q
    is reconstructed on demand by walking the level factors.
    """

    root: _TsqrNode
    R: np.ndarray
    signs: np.ndarray
    nblocks: int
    levels: int

    def q_explicit(self):
        return self.root.assemble(np.diag(self.signs))


def tsqr(W, nblocks):
    """TSQR with pairwise reduction of stacked triangular factors.

    Rows are split into nblocks contiguous blocks (each at least ncols rows);
    odd block counts pass the trailing factor through unchanged.  One call
    counts as a single global reduction regardless of the partition.
    """
    W = np.asarray(W, dtype=np.float64)
    mrows, ncols = W.shape
    if nblocks < 1:
        raise ValueError("need at least one block")
    base, rem = divmod(mrows, nblocks)
    sizes = [base + 1] * rem + [base] * (nblocks - rem)
    if min(sizes) < ncols:
        raise ValueError(f"block too short: {min(sizes)} rows for {ncols} columns")
    nodes = []
    rs = []
    offset = 0
    for sz in sizes:
        Q, R = householder_qr(W[offset:offset + sz])
        nodes.append(_TsqrNode(Q=Q))
        rs.append(R)
        offset += sz
    levels = 0
    while len(nodes) > 1:
        levels += 1
        next_nodes = []
        next_rs = []
        for i in range(0, len(nodes) - 1, 2):
            Q, R = householder_qr(np.vstack([rs[i], rs[i + 1]]))
            next_nodes.append(_TsqrNode(Q=Q, children=(nodes[i], nodes[i + 1])))
            next_rs.append(R)
        if len(nodes) % 2:
            next_nodes.append(_TsqrNode(Q=None, children=(nodes[-1],)))
            next_rs.append(rs[-1])
        nodes, rs = next_nodes, next_rs
    R = rs[0]
    signs = np.where(np.diag(R) < 0.0, -1.0, 1.0)
    R = signs[:, None] * R
    return TsqrTree(root=nodes[0], R=R, signs=signs, nblocks=nblocks, levels=levels)


def bgs_project(Vprev, W, counter=None):
    """Block Gram-Schmidt: project W against the orthonormal columns of Vprev.

    Returns (coefficient block, updated W); the batched product counts as one
    global reduction.
    """
    W = np.asarray(W, dtype=np.float64)
    if Vprev is None or Vprev.size == 0:
        return np.zeros((0, W.shape[1])), W.copy()
    R = Vprev.T @ W
    if counter is not None:
        counter.count()
    return R, W - Vprev @ R


# ---------------------------------------------------------------------------
# Warmup estimates for basis parameters


def warmup_ritz_values(A, b, steps):
    """Ritz values from a few Arnoldi steps, for shift/rectangle estimation."""
    dec = arnoldi(A, np.asarray(b, dtype=np.float64), steps, OrthoScheme.MGS)
    m = dec.n
    if m == 0:
        return np.array([0.0 + 0.0j])
    return dense_eig_general(dec.Hbar[:m, :m])


def newton_basis_from_warmup(A, b, s):
    """Newton shifts = Leja-ordered Ritz values of s warmup Arnoldi steps."""
    ritz = warmup_ritz_values(A, b, s)
    vals = list(ritz)
    while len(vals) < s:
        vals.append(vals[-1].conjugate() if vals[-1].imag else vals[-1])
    return NewtonBasis(shifts=tuple(leja_order(vals)))


def chebyshev_basis_from_warmup(A, b, s):
    """Chebyshev rectangle from the bounding box of warmup Ritz values."""
    ritz = warmup_ritz_values(A, b, max(s, 2))
    re, im = ritz.real, ritz.imag
    center = float((re.max() + re.min()) / 2.0)
    xi1 = max(float((re.max() - re.min()) / 2.0), 1e-8)
    xi2 = max(float(np.abs(im).max()), 0.0)
    return ChebyshevBasis(center=center, xi1=xi1, xi2=xi2)


# ---------------------------------------------------------------------------
# s-step GMRES


def sstep_gmres(A, b, x0=None, s=4, t=5, spec=None, opts=None, nblocks=4):
    """s-step GMRES: s basis vectors per communication phase.

    Each outer block generates s new polynomial-basis vectors from the last
    orthonormal column, block-Gram-Schmidts them against the accumulated
    basis, factors the block with TSQR, and splices the triangular factors
    into the running Hessenberg matrix, so a whole block costs two modeled
    reductions (the batched projection - or the entry normalization for the
    first block - plus one TSQR tree).  Mathematically equivalent to plain
    GMRES with restart length s*t.

    Parameters
    ----------
    s, t : int
        Block size and blocks per restart cycle (restart length s*t).
    spec : MonomialBasis, NewtonBasis or ChebyshevBasis, optional
        Polynomial basis; defaults to a Newton basis with Leja-ordered
        Ritz-value shifts from s warmup steps (monomial when s == 1).
    nblocks : int
        Row partition for the TSQR trees.

    Returns
    -------
    SolveReport
        As for gmres; a vanishing block factor away from convergence raises
        SstepBlockError suggesting a smaller s.
    """
    opts = opts if opts is not None else GmresOptions()
    _reject_precond(opts, "sstep_gmres")
    _reject_weight(opts, "sstep_gmres")
    if s < 1 or t < 1:
        raise ValueError("need s >= 1 and t >= 1")
    if spec is None:
        spec = newton_basis_from_warmup(A, b, s) if s > 1 else MonomialBasis()
    opts = _clone_options(opts, restart=s * t,
                          max_iter=opts.max_iter if opts.max_iter is not None else len(b))
    diagnostics = {"basis": type(spec).__name__, "s": s, "t": t}

    def cycle(tally, r, budget, tol_abs, total_iter):
        return _sstep_cycle(tally, r, s, t, spec, nblocks, budget, tol_abs,
                            opts, total_iter, diagnostics)

    return _cycle_driver(A, b, x0, opts, cycle, diagnostics)


def _sstep_cycle(tally, r, s, t, spec, nblocks, budget, tol_abs, opts,
                 iter_offset, diagnostics=None):
    N = len(r)
    beta = float(np.linalg.norm(r))
    blocks = min(t, max(1, -(-budget // s)))
    fV = None              # accumulated orthonormal basis, N x (n+1)
    fH = None              # running Hessenberg, (n+1) x n
    ls = HessenbergLsState(s * blocks, beta)
    rhos = []
    status = "exhausted"
    n = 0

    def diag_cut(T):
        d = np.abs(np.diag(T))
        top = d.max() if len(d) else 0.0
        for p, v in enumerate(d):
            if v <= 1e-14 * top:
                return p
        return None

    for j in range(blocks):
        tally.counter.begin_step()
        grade_hit = False
        if j == 0:
            tally.counter.count()       # entry normalization of the cycle
            W, conv = build_basis(tally, r / beta, s, spec)
            tree = tsqr(W, min(nblocks, max(1, N // (s + 1))))
            tally.counter.count()       # one TSQR tree
            cut = diag_cut(tree.R)
            # a vanishing diagonal at c means basis vector c is dependent:
            # the assembled columns then end with a ~0 subdiagonal (grade)
            p = s if cut is None else cut
            grade_hit = p < s
            if p == 0:
                tally.counter.end_step()
                status = "breakdown"
                break
            Q = tree.q_explicit()
            Twin = tree.R[: p + 1, : p + 1]
            Bblock = conv.Bbar[: p + 1, :p]
            fV = Q[:, : p + 1]
            fH = _assemble_sstep_hessenberg(None, None, Twin, Bblock, None)
        else:
            start = fV[:, -1]
            W, conv = build_basis(tally, start, s, spec)
            Wacc = W[:, 1:]
            Racc, Wacc = bgs_project(fV, Wacc, tally.counter)
            tree = tsqr(Wacc, min(nblocks, max(1, N // max(s, 1))))
            tally.counter.count()
            cut = diag_cut(tree.R)
            # here the block start already sits in the basis, so a dependency
            # at c still yields c+1 assembled columns, the last with a ~0
            # subdiagonal carried by the vanishing triangular entry
            pc = s if cut is None else cut + 1
            grade_hit = cut is not None
            Q = tree.q_explicit()[:, :pc]
            Twin = tree.R[:pc, :pc]
            Racc = Racc[:, :pc]
            Bblock = conv.Bbar[: pc + 1, :pc]
            eta = fH[n, n - 1]
            fH = _assemble_sstep_hessenberg(fH, Racc, Twin, Bblock, eta)
            fV = np.hstack([fV, Q])
        tally.counter.end_step()
        new_n = fH.shape[1]
        for c in range(n, new_n):
            rho = ls.push_column(fH[: c + 2, c])
            rhos.append(rho)
            tally.counter.mark()
            if opts.iteration_callback is not None:
                opts.iteration_callback(iter_offset + len(rhos), rho / beta)
            if rho <= tol_abs:
                status = "converged"
                break
            if len(rhos) >= budget:
                break
        n = ls.ncols
        if status == "converged":
            break
        if grade_hit:
            raise SstepBlockError(
                "block triangular factor singular away from convergence; "
                "use a smaller s or a better-conditioned basis")
        if n >= budget:
            break
    if diagnostics is not None and fH is not None:
        diagnostics["hessenberg"] = fH
        diagnostics["basis_matrix"] = fV
    y = ls.solve(n) if n else np.zeros(0)
    update = fV[:, :n] @ y if n else np.zeros(N)
    return update, rhos, status


def _assemble_sstep_hessenberg(fH, Racc, Tfull, Bblock, eta):
    """Splice one block's factors into the running Hessenberg matrix.

    First block: Hbar = T_{p+1} Bbar T_p^{-1}.  Later blocks build the
    bordered conversion and triangular matrices and form
    T_{n+p+1} Bfrak T_{n+p}^{-1}; the previously assembled columns are
    unchanged by construction.
    """
    p = Bblock.shape[1]
    if fH is None:
        T = Tfull
        Bfrak = Bblock
        n_prev = 0
        Tbig = T
    else:
        n_prev = fH.shape[1]
        Bfrak = np.zeros((n_prev + p + 1, n_prev + p))
        Bfrak[:n_prev, :n_prev] = fH[:n_prev, :n_prev]
        Bfrak[n_prev, n_prev - 1] = eta
        Bfrak[n_prev:, n_prev:] = Bblock
        Tbig = np.eye(n_prev + p + 1)
        Tbig[: n_prev + 1, n_prev + 1:] = Racc
        Tbig[n_prev + 1:, n_prev + 1:] = Tfull
    Tsub = Tbig[: n_prev + p, : n_prev + p]
    M = Tbig @ Bfrak
    H = np.linalg.solve(Tsub.T, M.T).T
    # structural zeros below the first subdiagonal
    n_new = H.shape[1]
    for c in range(n_new):
        H[c + 2:, c] = 0.0
    return H


# ---------------------------------------------------------------------------
# Pipelined GMRES


def pipelined_gmres(A, b, x0=None, opts=None, theta=None):
    """Communication-hiding GMRES: one merged reduction per iteration, with
    the matrix-vector product ordered so it can overlap the reduction.

    Maintains the shifted companion sequence w_j = (A - theta I) v_j, so a
    degree-one Newton basis is built implicitly; theta defaults to the mean
    of a few warmup Ritz values.
    """
    opts = opts if opts is not None else GmresOptions()
    _reject_precond(opts, "pipelined_gmres")
    _reject_weight(opts, "pipelined_gmres")
    if theta is None:
        ritz = warmup_ritz_values(A, b, min(5, max(2, len(b) - 1)))
        theta = float(np.mean(ritz).real)
    diagnostics = {"theta": theta, "reorthogonalizations": 0}

    def cycle(tally, r, budget, tol_abs, total_iter):
        return _pipelined_cycle(tally, r, budget, theta, tol_abs, opts,
                                total_iter, diagnostics)

    return _cycle_driver(A, b, x0, opts, cycle, diagnostics)


def _pipelined_cycle(tally, r, m, theta, tol_abs, opts, iter_offset, state):
    N = len(r)
    beta = float(np.linalg.norm(r))
    tally.counter.count()
    V = np.zeros((N, m + 1))
    W = np.zeros((N, m + 1))
    V[:, 0] = r / beta
    W[:, 0] = tally(V[:, 0]) - theta * V[:, 0]
    H = np.zeros((m + 1, m))
    ls = HessenbergLsState(m, beta)
    rhos = []
    status = "exhausted"
    n = 0
    for j in range(m):
        tally.counter.begin_step()
        c = V[:, : j + 1].T @ W[:, j]
        sig = float(W[:, j] @ W[:, j])
        tally.counter.count()           # merged projections + squared norm
        tally.counter.end_step()
        u = tally(W[:, j])              # next product, overlappable
        radicand = sig - float(c @ c)
        floor = sig * max(64.0 * (j + 2) * float(np.finfo(np.float64).eps), 1e-8)
        if radicand < floor:
            # the radicand cannot be resolved (or went negative as the basis
            # degrades): retry this step once with a reorthogonalization; a
            # vanishing recomputed norm is the happy breakdown
            c, h_sub = _cgs2_coefficients(tally, V[:, : j + 1], W[:, j])
            state["reorthogonalizations"] += 1
            if not math.isfinite(h_sub):
                status = "breakdown"
                break
        else:
            h_sub = math.sqrt(radicand)
        H[: j + 1, j] = c
        H[j, j] += theta                # undo the shift on the diagonal entry
        col_scale = float(np.linalg.norm(H[: j + 1, j])) + h_sub
        breakdown = h_sub <= opts.breakdown_rel * col_scale
        H[j + 1, j] = 0.0 if breakdown else h_sub
        rho = ls.push_column(H[: j + 2, j])
        rhos.append(rho)
        tally.counter.mark()
        n = j + 1
        if opts.iteration_callback is not None:
            opts.iteration_callback(iter_offset + n, rho / beta)
        if rho <= tol_abs:
            status = "converged"
            break
        if breakdown:
            status = "breakdown"
            break
        V[:, j + 1] = (W[:, j] - V[:, : j + 1] @ c) / h_sub
        W[:, j + 1] = (u - W[:, : j + 1] @ H[: j + 1, j]) / h_sub
    y = ls.solve(n) if n else np.zeros(0)
    update = V[:, :n] @ y if n else np.zeros(N)
    return update, rhos, status


def _cgs2_coefficients(tally, V, w):
    """Classical reorthogonalization fallback for a failed radicand."""
    h1 = V.T @ w
    tally.counter.count()
    w1 = w - V @ h1
    h2 = V.T @ w1
    tally.counter.count()
    w1 = w1 - V @ h2
    h_sub = float(np.linalg.norm(w1))
    tally.counter.count()
    return h1 + h2, h_sub


# ---------------------------------------------------------------------------
# Low-sync GMRES


def lowsync_gmres(A, b, x0=None, opts=None):
    """GMRES over the inverse-compact-WY projector with lagged normalization:
    the merged batch of every iteration carries the correction row, the
    projections, and the deferred norm, so one reduction per iteration
    suffices.  A vanishing deferred norm surfaces as a breakdown exit.
    """
    opts = opts if opts is not None else GmresOptions()
    opts = _clone_options(opts, scheme=OrthoScheme.ICWY)
    return _restarted_engine(A, b, x0, opts)
