"""Block semidefinite programs in standard form and a primal-dual solver.

Standard form used throughout::

    minimize    <C, X> + c_free . z
    subject to  <A_i, X> + (B z)_i = b_i,   i = 1..m
                X = diag(X_1, ..., X_K) PSD,  z free

Block data are stored sparsely as upper-triangle triplets (constraint, row,
col, value), which maps one-to-one onto the SDPA sparse format.

The solver is an infeasible-start primal-dual path-following method using
the HKM search direction with Mehrotra predictor-corrector steps and dense
linear algebra (Schur complement assembled per block, KKT system with free
variables solved by symmetric-indefinite factorization).

Pure feasibility problems (all-zero objective) are solved through a
max-margin embedding: every block is written as ``X_k + t I`` with
``X_k`` PSD, ``t`` free, the total trace bounded by a normalization
constant, and ``t`` maximized. The optimal ``t`` is the largest uniform
eigenvalue margin any feasible point can have; ``t < -infeas_threshold``
proves infeasibility of the original problem (within the normalization).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

logger = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
INACCURATE = "inaccurate"
ITERATION_LIMIT = "iteration_limit"


class SdpError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    size: int
    kind: str = "psd"  # "psd" or "diag"

    def __post_init__(self):
        if self.size < 1:
            raise SdpError("block size must be positive")
        if self.kind not in ("psd", "diag"):
            raise SdpError(f"unknown block kind {self.kind!r}")


@dataclass
class BlockData:
    """Upper-triangle triplets of one block across all constraints."""

    con: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    @classmethod
    def empty(cls) -> "BlockData":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0))

    @classmethod
    def from_entries(cls, entries) -> "BlockData":
        """Build from ``(con, i, j, v)`` tuples, summing duplicates and folding
        lower-triangle entries onto the upper triangle."""
        acc: dict[tuple[int, int, int], float] = {}
        for k, i, j, v in entries:
            if i > j:
                i, j = j, i
            key = (int(k), int(i), int(j))
            acc[key] = acc.get(key, 0.0) + float(v)
        keys = sorted(k for k, v in acc.items() if v != 0.0)
        if not keys:
            return cls.empty()
        arr = np.array(keys, dtype=int)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], np.array([acc[k] for k in keys]))


@dataclass
class Sdp:
    blocks: list[Block]
    A: list[BlockData]           # per block, constraint matrices
    b: np.ndarray
    C: list[BlockData] | None = None   # per block, con index ignored (0)
    B: np.ndarray | None = None        # (m, n_free) coefficients of free variables
    c_free: np.ndarray | None = None

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        m = len(self.b)
        if self.C is None:
            self.C = [BlockData.empty() for _ in self.blocks]
        if self.B is None:
            self.B = np.zeros((m, 0))
        B = np.asarray(self.B, dtype=float)
        self.B = B.reshape(m, B.shape[-1] if B.ndim == 2 else (B.size // m if m else 0))
        if self.c_free is None:
            self.c_free = np.zeros(self.B.shape[1])
        self.c_free = np.asarray(self.c_free, dtype=float).reshape(-1)
        self.validate()

    @property
    def m(self) -> int:
        return len(self.b)

    @property
    def n_free(self) -> int:
        return self.B.shape[1]

    @property
    def psd_dim(self) -> int:
        return sum(blk.size for blk in self.blocks)

    def validate(self) -> None:
        if len(self.A) != len(self.blocks) or len(self.C) != len(self.blocks):
            raise SdpError("block data count does not match block structure")
        if not np.all(np.isfinite(self.b)):
            raise SdpError("right-hand side must be finite")
        if len(self.c_free) != self.n_free:
            raise SdpError("free objective length mismatch")
        for blk, data in zip(self.blocks, list(self.A) + []):
            if len(data.val) and (data.row.max() >= blk.size or data.col.max() >= blk.size
                                  or data.con.max() >= self.m or data.con.min() < 0):
                raise SdpError("constraint entry outside block or constraint range")
            if blk.kind == "diag" and np.any(data.row != data.col):
                raise SdpError("off-diagonal entry in a diagonal block")
        for blk, data in zip(self.blocks, self.C):
            if len(data.val) and (data.row.max() >= blk.size or data.col.max() >= blk.size):
                raise SdpError("objective entry outside block")

    def is_feasibility(self) -> bool:
        return all(len(c.val) == 0 for c in self.C) and not np.any(self.c_free)

    # dense views used by the solver and tests
    def dense_A(self, k: int, rows=None) -> np.ndarray:
        n = self.blocks[k].size
        d = self.A[k]
        if rows is None:
            out = np.zeros((self.m, n, n))
            con = d.con
        else:
            index = {r: i for i, r in enumerate(rows)}
            out = np.zeros((len(rows), n, n))
            con = np.array([index[c] for c in d.con], dtype=int)
        np.add.at(out, (con, d.row, d.col), d.val)
        off = d.row != d.col
        np.add.at(out, (con[off], d.col[off], d.row[off]), d.val[off])
        return out

    def dense_C(self, k: int) -> np.ndarray:
        n = self.blocks[k].size
        d = self.C[k]
        out = np.zeros((n, n))
        np.add.at(out, (d.row, d.col), d.val)
        off = d.row != d.col
        np.add.at(out, (d.col[off], d.row[off]), d.val[off])
        return out

    def apply_A(self, X: list[np.ndarray]) -> np.ndarray:
        """``(<A_i, X>)_i`` for block-diagonal ``X``; only the symmetric part of ``X`` counts."""
        out = np.zeros(self.m)
        for d, Xk in zip(self.A, X):
            w = np.where(d.row == d.col, 0.5, 1.0)
            np.add.at(out, d.con, w * d.val * (Xk[d.row, d.col] + Xk[d.col, d.row]))
        return out


@dataclass(frozen=True)
class SolverOptions:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    tol_psd: float = 1e-9
    max_iters: int = 200
    max_psd_dim: int = 400
    infeas_threshold: float = 1e-6


@dataclass
class SdpSolution:
    status: str
    X: list[np.ndarray]
    y: np.ndarray
    free: np.ndarray
    S: list[np.ndarray]
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    primal_objective: float = float("nan")
    dual_objective: float = float("nan")
    margin: float | None = None   # optimal eigenvalue margin in feasibility mode
    message: str = ""
    history: list[dict] = field(default_factory=list, repr=False)

    def metrics(self) -> dict:
        return {
            "status": self.status,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "gap": self.gap,
            "iterations": self.iterations,
            "primal_objective": self.primal_objective,
            "dual_objective": self.dual_objective,
            "margin": self.margin,
            "message": self.message,
        }


def min_eigenvalue(M, sym_tol: float = 1e-12) -> float:
    """Smallest eigenvalue of a symmetric matrix.

    Uses LAPACK's symmetric eigensolver (Householder tridiagonalization
    followed by implicit QR).
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise SdpError("matrix is not square")
    if M.size == 0:
        return float("inf")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > sym_tol * scale:
        raise SdpError("matrix is not symmetric")
    return float(np.linalg.eigvalsh((M + M.T) / 2)[0])


# ---------------------------------------------------------------------------
# interior-point core
# ---------------------------------------------------------------------------

class _Problem:
    """Dense working copy of an Sdp for the interior-point iterations."""

    def __init__(self, A_blocks, rows, B, b, C_blocks, cf):
        self.A = A_blocks        # list of (m_k, n, n) arrays for rows[k]
        self.rows = rows         # list of int arrays: constraint indices touching block k
        self.B = B
        self.b = b
        self.C = C_blocks
        self.cf = cf
        self.m = len(b)
        self.sizes = [C.shape[0] for C in C_blocks]
        self.ntot = sum(self.sizes)

    def A_op(self, X):
        out = np.zeros(self.m)
        for Ak, r, Xk in zip(self.A, self.rows, X):
            out[r] += Ak.reshape(len(r), -1) @ Xk.ravel()
        return out

    def AT_op(self, y):
        return [np.tensordot(y[r], Ak, axes=1) for Ak, r in zip(self.A, self.rows)]


def _inv_chol(M):
    L = np.linalg.cholesky(M)
    Linv = sla.solve_triangular(L, np.eye(len(M)), lower=True)
    return L, Linv.T @ Linv


def _max_step(L, dM):
    """Largest alpha with ``L L^T + alpha dM`` PSD (inf if unbounded)."""
    W = sla.solve_triangular(L, dM, lower=True)
    W = sla.solve_triangular(L, W.T, lower=True)
    lam = np.linalg.eigvalsh((W + W.T) / 2)[0]
    return math.inf if lam >= 0 else -1.0 / lam


def _solve_kkt(M, B, r1, r2):
    m, k = B.shape
    scale = max(1.0, float(np.max(np.abs(np.diag(M)))) if m else 1.0)
    Mr = M + 1e-15 * scale * np.eye(m)
    if k == 0:
        try:
            c = sla.cho_factor(Mr, check_finite=False)
            return sla.cho_solve(c, r1, check_finite=False), np.zeros(0)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(M, r1, rcond=None)[0]
            return sol, np.zeros(0)
    K = np.zeros((m + k, m + k))
    K[:m, :m] = Mr
    K[:m, m:] = B
    K[m:, :m] = B.T
    rhs = np.concatenate([r1, r2])
    try:
        # ill-conditioning is expected near the solution; the residual test decides
        with np.errstate(all="raise"), warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            sol = sla.solve(K, rhs, assume_a="sym", check_finite=False)
        if not np.all(np.isfinite(sol)) or np.linalg.norm(K @ sol - rhs) > 1e-6 * (1 + np.linalg.norm(rhs)):
            raise np.linalg.LinAlgError
    except (np.linalg.LinAlgError, FloatingPointError, sla.LinAlgWarning):
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:m], sol[m:]


def _ipm(P: _Problem, opts: SolverOptions, detect_infeasibility: bool = True):
    nb = len(P.sizes)
    bnorm = np.linalg.norm(P.b)
    Cnorm = math.sqrt(sum(np.sum(C * C) for C in P.C) + float(P.cf @ P.cf))

    X, S = [], []
    for k, n in enumerate(P.sizes):
        Ak = P.A[k]
        anorm = np.sqrt(np.sum(Ak * Ak, axis=(1, 2))) if len(Ak) else np.zeros(1)
        bk = P.b[P.rows[k]] if len(P.rows[k]) else np.zeros(1)
        xi = max(10.0, math.sqrt(n), math.sqrt(n) * float(np.max((1 + np.abs(bk)) / (1 + anorm))))
        eta = max(10.0, math.sqrt(n), float(np.max(anorm)), float(np.linalg.norm(P.C[k])))
        X.append(xi * np.eye(n))
        S.append(eta * np.eye(n))
    y = np.zeros(P.m)
    z = np.zeros(P.B.shape[1])

    history = []
    status, message = ITERATION_LIMIT, "iteration limit reached"
    info = {}
    stall = 0
    it = 0
    for it in range(opts.max_iters + 1):
        ATy = P.AT_op(y)
        rp = P.b - P.A_op(X) - P.B @ z
        Rd = [P.C[k] - ATy[k] - S[k] for k in range(nb)]
        rf = P.cf - P.B.T @ y
        xs = sum(float(np.sum(X[k] * S[k])) for k in range(nb))
        mu = xs / P.ntot
        pobj = sum(float(np.sum(P.C[k] * X[k])) for k in range(nb)) + float(P.cf @ z)
        dobj = float(P.b @ y)
        pres = np.linalg.norm(rp) / (1 + bnorm)
        dres = math.sqrt(sum(np.sum(R * R) for R in Rd) + float(rf @ rf)) / (1 + Cnorm)
        rgap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        corr = sum(float(np.sum(Rd[k] * X[k])) for k in range(nb)) + float(rf @ z) - float(rp @ y)
        history.append(dict(iter=it, pobj=pobj, dobj=dobj, xs=xs, corr=corr, pres=pres,
                            dres=dres, gap=rgap, mu=mu))
        info = dict(pres=pres, dres=dres, gap=rgap, pobj=pobj, dobj=dobj)
        logger.debug("it %3d pobj %+.8e dobj %+.8e pres %.2e dres %.2e gap %.2e mu %.2e",
                     it, pobj, dobj, pres, dres, rgap, mu)
        if not (np.isfinite(pobj) and np.isfinite(dobj) and np.isfinite(mu)):
            status, message = INACCURATE, "non-finite iterate"
            break
        if pres <= opts.tol_feas and dres <= opts.tol_feas and rgap <= opts.tol_gap:
            status, message = FEASIBLE, "converged"
            break
        if detect_infeasibility and dobj > 0:
            ray = math.sqrt(sum(np.sum((ATy[k] + S[k]) ** 2) for k in range(nb))
                            + float(np.sum((P.B.T @ y) ** 2))) / dobj
            if ray < 1e-8 and dobj > 1e3:
                status, message = INFEASIBLE, f"dual improving ray (residual {ray:.2e})"
                break
        if detect_infeasibility and pobj < 0:
            ray = np.linalg.norm(P.A_op(X) + P.B @ z) / -pobj
            if ray < 1e-8 and -pobj > 1e3:
                status, message = INACCURATE, f"primal improving ray: dual infeasible ({ray:.2e})"
                break
        if it == opts.max_iters:
            break

        try:
            LX = [np.linalg.cholesky(Xk) for Xk in X]
            LS, Sinv = zip(*[_inv_chol(Sk) for Sk in S])
        except np.linalg.LinAlgError:
            status, message = INACCURATE, "lost positive definiteness"
            break

        M = np.zeros((P.m, P.m))
        for k in range(nb):
            r = P.rows[k]
            if len(r) == 0:
                continue
            Ak = P.A[k]
            T = X[k] @ Ak @ Sinv[k]
            M[np.ix_(r, r)] += Ak.reshape(len(r), -1) @ T.reshape(len(r), -1).T
        M = (M + M.T) / 2

        XRdSinv = [X[k] @ Rd[k] @ Sinv[k] for k in range(nb)]

        def direction(D):
            r1 = rp - P.A_op([D[k] - XRdSinv[k] for k in range(nb)])
            dy, dz = _solve_kkt(M, P.B, r1, rf)
            ATdy = P.AT_op(dy)
            dS = [Rd[k] - ATdy[k] for k in range(nb)]
            dX = []
            for k in range(nb):
                G = D[k] - X[k] @ dS[k] @ Sinv[k]
                dX.append((G + G.T) / 2)
            return dX, dS, dy, dz

        def steps(dX, dS):
            ap = min([_max_step(LX[k], dX[k]) for k in range(nb)] + [math.inf])
            ad = min([_max_step(LS[k], dS[k]) for k in range(nb)] + [math.inf])
            return ap, ad

        # predictor
        dXa, dSa, _, _ = direction([-Xk for Xk in X])
        ap, ad = steps(dXa, dSa)
        ap, ad = min(1.0, ap), min(1.0, ad)
        xs_aff = sum(float(np.sum((X[k] + ap * dXa[k]) * (S[k] + ad * dSa[k]))) for k in range(nb))
        sigma = min(1.0, max(0.0, (xs_aff / xs) ** 3)) if xs > 0 else 0.0
        # corrector
        D = [sigma * mu * Sinv[k] - X[k] - dXa[k] @ dSa[k] @ Sinv[k] for k in range(nb)]
        dX, dS, dy, dz = direction(D)
        ap, ad = steps(dX, dS)
        gamma = 0.9 + 0.09 * min(1.0, min(ap, ad))
        ap, ad = min(1.0, gamma * ap), min(1.0, gamma * ad)
        if max(ap, ad) < 1e-10:
            stall += 1
            if stall > 3:
                status, message = INACCURATE, "step lengths collapsed"
                break
        else:
            stall = 0
        X = [X[k] + ap * dX[k] for k in range(nb)]
        X = [(Xk + Xk.T) / 2 for Xk in X]
        S = [S[k] + ad * dS[k] for k in range(nb)]
        S = [(Sk + Sk.T) / 2 for Sk in S]
        y = y + ad * dy
        z = z + ap * dz

    return X, S, y, z, status, message, it, info, history


def _dense_problem(sdp: Sdp):
    A_blocks, rows = [], []
    for k in range(len(sdp.blocks)):
        r = np.unique(sdp.A[k].con)
        rows.append(r)
        A_blocks.append(sdp.dense_A(k, rows=list(r)))
    C_blocks = [sdp.dense_C(k) for k in range(len(sdp.blocks))]
    return A_blocks, rows, C_blocks


def solve(sdp: Sdp, opts: SolverOptions | None = None) -> SdpSolution:
    """Solve a block SDP; never raises on numerical trouble.

    Feasibility problems (all-zero objective) go through the max-margin
    embedding described in the module docstring.
    """
    opts = opts or SolverOptions()
    if sdp.psd_dim > opts.max_psd_dim:
        raise SdpError(f"total PSD dimension {sdp.psd_dim} exceeds cap {opts.max_psd_dim}")
    A_blocks, rows, C_blocks = _dense_problem(sdp)
    m = sdp.m
    B = sdp.B

    # constraints with no data at all are either vacuous or contradictory
    touched = np.zeros(m, dtype=bool)
    for r in rows:
        touched[r] = True
    touched |= np.any(B != 0, axis=1)
    if np.any(~touched & (np.abs(sdp.b) > 0)):
        return _trivial_infeasible(sdp, "empty constraint row with nonzero right-hand side")
    keep = np.flatnonzero(touched)
    remap = -np.ones(m, dtype=int)
    remap[keep] = np.arange(len(keep))
    rows_k = [remap[r] for r in rows]
    b_k = sdp.b[keep]
    B_k = B[keep]

    if sdp.is_feasibility():
        return _solve_feasibility(sdp, A_blocks, rows_k, B_k, b_k, keep, opts)

    P = _Problem(A_blocks, rows_k, B_k, b_k, C_blocks, sdp.c_free)
    X, S, y_k, z, status, message, it, info, history = _ipm(P, opts)
    y = np.zeros(m)
    y[keep] = y_k
    sol = SdpSolution(status, X, y, z, S, info.get("pres", np.nan), info.get("dres", np.nan),
                      info.get("gap", np.nan), it, info.get("pobj", np.nan),
                      info.get("dobj", np.nan), None, message, history)
    if sol.status == FEASIBLE:
        pres = np.linalg.norm(sdp.b - sdp.apply_A(X) - sdp.B @ z) / (1 + np.linalg.norm(sdp.b))
        sol.primal_residual = pres
        if min(min_eigenvalue(Xk) for Xk in X) < -opts.tol_psd or pres > opts.tol_feas:
            sol.status, sol.message = INACCURATE, "final iterate failed verification"
    return sol


def _trivial_infeasible(sdp, msg):
    X = [np.zeros((b.size, b.size)) for b in sdp.blocks]
    return SdpSolution(INFEASIBLE, X, np.zeros(sdp.m), np.zeros(sdp.n_free),
                       [np.eye(b.size) for b in sdp.blocks], float("inf"), 0.0, 0.0, 0,
                       message=msg)


def normalization_bound(sdp: Sdp) -> float:
    """Trace budget used by the feasibility embedding."""
    return sdp.psd_dim * max(1.0, float(np.max(np.abs(sdp.b))) if sdp.m else 1.0)


def _solve_feasibility(sdp, A_blocks, rows, B, b, keep, opts):
    m = len(b)
    D = sdp.psd_dim
    N = normalization_bound(sdp)
    # t column: <A_i, I> summed over blocks
    t_col = np.zeros(m)
    for Ak, r in zip(A_blocks, rows):
        t_col[r] += np.trace(Ak, axis1=1, axis2=2)
    A_aug, rows_aug = [], []
    for Ak, r in zip(A_blocks, rows):
        n = Ak.shape[1]
        A_aug.append(np.concatenate([Ak, np.eye(n)[None]], axis=0))
        rows_aug.append(np.concatenate([r, [m]]).astype(int))
    A_aug.append(np.ones((1, 1, 1)))
    rows_aug.append(np.array([m]))
    B_aug = np.zeros((m + 1, B.shape[1] + 1))
    B_aug[:m, :B.shape[1]] = B
    B_aug[:m, -1] = t_col
    B_aug[m, -1] = D
    b_aug = np.concatenate([b, [N]])
    C_aug = [np.zeros((n, n)) for n in [blk.size for blk in sdp.blocks]] + [np.zeros((1, 1))]
    cf = np.zeros(B.shape[1] + 1)
    cf[-1] = -1.0
    P = _Problem(A_aug, rows_aug, B_aug, b_aug, C_aug, cf)
    Xa, Sa, ya, za, status, message, it, info, history = _ipm(P, opts, detect_infeasibility=False)

    X = Xa[:-1]
    S = Sa[:-1]
    t = float(za[-1])
    z = za[:-1]
    y = np.zeros(sdp.m)
    y[keep] = ya[:m]
    if t >= 0:
        X = [Xk + t * np.eye(len(Xk)) for Xk in X]
    rp = sdp.b - sdp.apply_A(X) - sdp.B @ z
    pres = np.linalg.norm(rp) / (1 + np.linalg.norm(sdp.b))
    min_eig = min((min_eigenvalue((Xk + Xk.T) / 2) for Xk in X), default=0.0)

    if status == FEASIBLE:
        if t < -opts.infeas_threshold:
            status, message = INFEASIBLE, f"optimal eigenvalue margin {t:.3e} < 0"
        elif pres <= opts.tol_feas and min_eig >= -opts.tol_psd:
            message = f"margin {t:.3e}"
        else:
            status = INACCURATE
            message = f"margin {t:.3e} in gray zone (residual {pres:.2e}, min eig {min_eig:.2e})"
    elif status == ITERATION_LIMIT and t < -10 * opts.infeas_threshold and info.get("gap", 1) < 1e-4:
        status, message = INFEASIBLE, f"eigenvalue margin {t:.3e} (iteration limit)"
    elif t > opts.infeas_threshold:
        # a clear positive margin leaves room to repair the equality residual
        # of the last iterate; feasibility is then verified on that point alone
        Xr, zr = _restore_primal(sdp, X, z)
        pr = np.linalg.norm(sdp.b - sdp.apply_A(Xr) - sdp.B @ zr) / (1 + np.linalg.norm(sdp.b))
        er = min((min_eigenvalue((Xk + Xk.T) / 2) for Xk in Xr), default=0.0)
        if pr <= opts.tol_feas and er >= -opts.tol_psd:
            X, z, pres = Xr, zr, pr
            status, message = FEASIBLE, f"margin {t:.3e} (restored primal point; {message})"
    return SdpSolution(status, X, y, z, S, pres, info.get("dres", np.nan), info.get("gap", np.nan),
                       it, info.get("pobj", np.nan), info.get("dobj", np.nan), t, message, history)


def _restore_primal(sdp: Sdp, X: list[np.ndarray], z: np.ndarray):
    """Least-norm correction of ``(X, z)`` onto the affine set ``A(X) + B z = b``."""
    r = sdp.b - sdp.apply_A(X) - sdp.B @ z
    cols, idx = [], []
    for k, blk in enumerate(sdp.blocks):
        n = blk.size
        iu, ju = np.triu_indices(n)
        Ak = sdp.dense_A(k)
        w = np.where(iu == ju, 1.0, 2.0)
        cols.append(Ak[:, iu, ju] * w)
        idx.append((iu, ju))
    cols.append(sdp.B)
    M = np.concatenate(cols, axis=1)
    delta = np.linalg.lstsq(M, r, rcond=None)[0]
    out, pos = [], 0
    for (iu, ju), Xk in zip(idx, X):
        D = np.zeros_like(Xk)
        D[iu, ju] = delta[pos:pos + len(iu)]
        D[ju, iu] = delta[pos:pos + len(iu)]
        out.append(Xk + D)
        pos += len(iu)
    return out, z + delta[pos:]


# ---------------------------------------------------------------------------
# SDPA sparse format
# ---------------------------------------------------------------------------

def export_sdpa(sdp: Sdp, path) -> None:
    """Write ``sdp`` in SDPA sparse format (``.dat-s``).

    SDPA's dual form ``max <F0,Y> s.t. <Fi,Y> = ci, Y PSD`` is our primal with
    ``Fi = A_i``, ``ci = b_i`` and ``F0 = -C``. Free variables are split as
    ``z = z+ - z-`` into one trailing diagonal block, announced by a
    ``* free_split`` comment so :func:`parse_sdpa` can fold it back.
    """
    lines = ['"densityreach SDP export"']
    blocks = list(sdp.blocks)
    k = sdp.n_free
    if k:
        lines.append(f"* free_split {len(blocks) + 1} {k}")
    struct = [(-b.size if b.kind == "diag" else b.size) for b in blocks]
    if k:
        struct.append(-2 * k)
    lines.append(str(sdp.m))
    lines.append(str(len(struct)))
    lines.append(" ".join(str(s) for s in struct))
    lines.append(" ".join(repr(float(v)) for v in sdp.b) if sdp.m else "{}")
    entries = []
    for bi, d in enumerate(sdp.C):
        for i, j, v in zip(d.row, d.col, d.val):
            entries.append((0, bi + 1, i + 1, j + 1, -v))
    if k:
        for j, c in enumerate(sdp.c_free):
            if c != 0:
                entries.append((0, len(blocks) + 1, j + 1, j + 1, -c))
                entries.append((0, len(blocks) + 1, k + j + 1, k + j + 1, c))
    for bi, d in enumerate(sdp.A):
        for c, i, j, v in zip(d.con, d.row, d.col, d.val):
            entries.append((c + 1, bi + 1, i + 1, j + 1, v))
    if k:
        rr, cc = np.nonzero(sdp.B)
        for r, j in zip(rr, cc):
            v = sdp.B[r, j]
            entries.append((r + 1, len(blocks) + 1, j + 1, j + 1, v))
            entries.append((r + 1, len(blocks) + 1, k + j + 1, k + j + 1, -v))
    entries.sort(key=lambda e: (e[0], e[1], e[2], e[3]))
    for mat, blk, i, j, v in entries:
        lines.append(f"{mat} {blk} {i} {j} {float(v)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_sdpa(path) -> Sdp:
    """Read an SDPA sparse file (inverse of :func:`export_sdpa`)."""
    raw = Path(path).read_text().splitlines()
    free_split = None
    body = []
    for line in raw:
        s = line.strip()
        if not s:
            continue
        if s.startswith("*") or s.startswith('"'):
            parts = s.lstrip("*").split()
            if parts[:1] == ["free_split"]:
                free_split = (int(parts[1]), int(parts[2]))
            continue
        body.append(s)

    def nums(s):
        for ch in "{}(),":
            s = s.replace(ch, " ")
        return s.split()

    m = int(nums(body[0])[0])
    nblock = int(nums(body[1])[0])
    struct = [int(v) for v in nums(body[2])[:nblock]]
    pos = 3
    bvals: list[float] = []
    while len(bvals) < m:
        bvals.extend(float(v) for v in nums(body[pos]))
        pos += 1
    if m == 0 and pos < len(body) and not nums(body[pos]):
        pos += 1
    triplets: dict[int, list] = {bi: [] for bi in range(nblock)}
    objective: dict[int, list] = {bi: [] for bi in range(nblock)}
    for s in body[pos:]:
        t = nums(s)
        if not t:
            continue
        mat, blk, i, j = (int(v) for v in t[:4])
        v = float(t[4])
        if mat == 0:
            objective[blk - 1].append((0, i - 1, j - 1, -v))
        else:
            triplets[blk - 1].append((mat - 1, i - 1, j - 1, v))

    blocks, A, C = [], [], []
    B = np.zeros((m, 0))
    c_free = np.zeros(0)
    for bi, s in enumerate(struct):
        if free_split and bi == free_split[0] - 1:
            k = free_split[1]
            B = np.zeros((m, k))
            c_free = np.zeros(k)
            for con, i, j, v in triplets[bi]:
                if i < k:
                    B[con, i] = v
            for _, i, j, v in objective[bi]:
                if i < k:
                    c_free[i] = v
            continue
        blocks.append(Block(abs(s), "diag" if s < 0 else "psd"))
        A.append(BlockData.from_entries(triplets[bi]))
        C.append(BlockData.from_entries(objective[bi]))
    return Sdp(blocks, A, np.array(bvals[:m]), C, B, c_free)
