"""Dense primal-dual interior-point solver for small block-diagonal SDPs.

Problems are in the form::

    maximize   <C, X>
    subject to <A_i, X> = b_i,   i = 1..m
               X = diag(X_1, ..., X_k) >= 0

with dual ``minimize b^T y`` subject to ``S = sum_i y_i A_i - C >= 0``.
The method is an infeasible-start Mehrotra predictor-corrector using the
Nesterov-Todd search direction; the Schur complement is factored through
a QR decomposition of its square root.  Constraint matrices are stored sparsely; every block is
dense.

The module also reads and writes the SDPA sparse text format
(``.dat-s``), whose "dual" problem is exactly the maximization above.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps

from .errors import SolverError

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolverOptions:
    tol: float = 1e-7
    max_iter: int = 200
    step_fraction: float = 0.98
    reg_start: float = 1e-12
    reg_max: float = 1e-8
    refine_steps: int = 3
    recenter_below: float = 0.1
    rank_tol: float = 1e-10
    verbose: bool = False


class SdpProblem:
    """Block-diagonal SDP with sparse symmetric constraint matrices.

    Constraints are added entry by entry; an entry ``(block, i, j, v)``
    with ``i != j`` contributes ``v`` at both ``(i, j)`` and ``(j, i)`` so
    that ``<A, X> = 2 v X[i, j]``.  The same rule applies to the objective.
    """

    def __init__(self, block_dims: Sequence[int]):
        self.block_dims = [int(d) for d in block_dims]
        if not self.block_dims or min(self.block_dims) < 1:
            raise ValueError("block sizes must be positive")
        self.c = [np.zeros((d, d)) for d in self.block_dims]
        self._rows: list[list[tuple[int, int, int, float]]] = []
        self._rhs: list[float] = []

    @property
    def m(self) -> int:
        return len(self._rows)

    def add_objective(self, block: int, i: int, j: int, value: float) -> None:
        self.c[block][i, j] += value
        if i != j:
            self.c[block][j, i] += value

    def add_constraint(self, entries: Sequence[tuple[int, int, int, float]], rhs: float) -> int:
        for blk, i, j, _ in entries:
            d = self.block_dims[blk]
            if not (0 <= i < d and 0 <= j < d):
                raise IndexError(f"entry ({i}, {j}) outside block {blk} of size {d}")
        self._rows.append([(int(b), int(i), int(j), float(v)) for b, i, j, v in entries])
        self._rhs.append(float(rhs))
        return len(self._rows) - 1

    @property
    def b(self) -> np.ndarray:
        return np.array(self._rhs, dtype=float)

    def constraint_matrices(self, k: int) -> list[np.ndarray]:
        """Dense per-block matrices of constraint ``k``."""
        mats = [np.zeros((d, d)) for d in self.block_dims]
        for blk, i, j, v in self._rows[k]:
            mats[blk][i, j] += v
            if i != j:
                mats[blk][j, i] += v
        return mats

    def operator(self, rows: Sequence[int] | None = None) -> list[sps.csr_matrix]:
        """Per-block sparse maps ``E_k`` with ``A(X) = sum_k E_k vec(X_k)`` (row-major vec)."""
        rows = range(self.m) if rows is None else rows
        mats = []
        for blk, d in enumerate(self.block_dims):
            r_idx, c_idx, vals = [], [], []
            for r, k in enumerate(rows):
                for b, i, j, v in self._rows[k]:
                    if b != blk:
                        continue
                    r_idx.append(r)
                    c_idx.append(i * d + j)
                    vals.append(v)
                    if i != j:
                        r_idx.append(r)
                        c_idx.append(j * d + i)
                        vals.append(v)
            mats.append(sps.csr_matrix((vals, (r_idx, c_idx)), shape=(len(rows), d * d)))
        return mats

    def check_symmetric(self, tol: float = 1e-12) -> bool:
        return all(np.max(np.abs(c - c.T), initial=0.0) <= tol for c in self.c)


@dataclass
class SdpSolution:
    x_blocks: list[np.ndarray]
    y: np.ndarray
    s_blocks: list[np.ndarray]
    status: Status
    gap: float
    primal_res: float
    dual_res: float
    primal_obj: float
    dual_obj: float
    iterations: int
    dropped_rows: list[int] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def _apply(ops, blocks) -> np.ndarray:
    return sum(E @ X.reshape(-1) for E, X in zip(ops, blocks))


def _adjoint(ops, y, dims) -> list[np.ndarray]:
    return [(E.T @ y).reshape(d, d) for E, d in zip(ops, dims)]


def residuals(p: SdpProblem, sol: SdpSolution) -> tuple[float, float, float]:
    """``(||A(X) - b||_inf, ||A*(y) - S - C||_max, relative duality gap)``.

    The gap is ``|<C, X> - b^T y| / (1 + |b^T y|)``.  Rows dropped as
    linearly dependent carry a zero multiplier.
    """
    ops = p.operator()
    y = np.zeros(p.m)
    keep = [k for k in range(p.m) if k not in set(sol.dropped_rows)]
    y[keep] = sol.y if len(sol.y) == len(keep) else sol.y[keep]
    ax = _apply(ops, sol.x_blocks)
    pres = float(np.max(np.abs(ax - p.b), initial=0.0))
    aty = _adjoint(ops, y, p.block_dims)
    dres = max(float(np.max(np.abs(a - s - c))) for a, s, c in zip(aty, sol.s_blocks, p.c))
    pobj = sum(float(np.sum(c * x)) for c, x in zip(p.c, sol.x_blocks))
    dobj = float(p.b @ y)
    return pres, dres, abs(pobj - dobj) / (1.0 + abs(dobj))


def _independent_rows(p: SdpProblem, tol: float) -> tuple[list[int], list[int]]:
    ops = p.operator()
    dense = np.hstack([E.toarray() for E in ops]) if p.m else np.zeros((0, 0))
    if p.m == 0:
        return [], []
    norms = np.linalg.norm(dense, axis=1)
    _, r, piv = sla.qr(dense.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = max(1.0, float(norms.max()))
    rank = int(np.sum(diag > tol * scale))
    keep = sorted(int(k) for k in piv[:rank])
    dropped = sorted(int(k) for k in piv[rank:])
    return keep, dropped


def _dependent_mismatch(p: SdpProblem, keep: list[int], dropped: list[int]) -> float:
    """How far the rhs of dropped rows is from the combination implied by the kept rows."""
    dense = np.hstack([E.toarray() for E in p.operator()])
    coef, *_ = np.linalg.lstsq(dense[keep].T, dense[dropped].T, rcond=None)
    b = p.b
    return float(np.max(np.abs(coef.T @ b[keep] - b[dropped]) / (1.0 + np.abs(b[dropped]))))


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    L = np.linalg.cholesky(X)
    W = sla.solve_triangular(L, dX, lower=True)
    W = sla.solve_triangular(L, W.T, lower=True)
    lam = np.linalg.eigvalsh(0.5 * (W + W.T))[0]
    return math.inf if lam >= 0 else -1.0 / lam


def _nt_scaling(X: np.ndarray, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nesterov-Todd scaling ``(G, G^-1, lam)`` with ``W = G G^T``, ``W Z W = X``
    and ``G^-1 X G^-T = G^T Z G = diag(lam)``."""
    L = np.linalg.cholesky(X)
    R = np.linalg.cholesky(Z)
    _, d, vt = np.linalg.svd(R.T @ L)
    if d.min() <= 0.0:
        raise np.linalg.LinAlgError("singular scaling")
    G = (L @ vt.T) / np.sqrt(d)
    Gi = np.sqrt(d)[:, None] * (vt @ sla.solve_triangular(L, np.eye(len(L)), lower=True))
    return G, Gi, d


def solve(p: SdpProblem, opts: SolverOptions | None = None) -> SdpSolution:
    """Solve ``p`` and return a status-tagged primal-dual pair.

    Linearly dependent constraints are dropped with a warning; if a dropped
    row is inconsistent with the rest the problem is reported infeasible.
    """
    opts = opts or SolverOptions()
    if not p.check_symmetric():
        raise ValueError("objective matrices must be symmetric")
    dims = p.block_dims
    n_tot = sum(dims)
    keep, dropped = _independent_rows(p, opts.rank_tol)
    if dropped:
        warnings.warn(f"dropping {len(dropped)} linearly dependent constraint(s): {dropped}", stacklevel=2)
        clash = _dependent_mismatch(p, keep, dropped)
        if clash > 1e-8:
            log.log(logging.INFO if opts.verbose else logging.DEBUG,
                    "dependent rows contradict the others by %.2e", clash)
            eye = [np.eye(d) for d in dims]
            return SdpSolution(x_blocks=eye, y=np.zeros(len(keep)), s_blocks=[np.eye(d) for d in dims],
                               status=Status.INFEASIBLE, gap=math.inf, primal_res=clash, dual_res=math.inf,
                               primal_obj=math.nan, dual_obj=math.nan, iterations=0, dropped_rows=dropped)
    ops = p.operator(keep)
    b = p.b[keep]
    m = len(keep)

    # Gram matrix of the constraints, used to keep A(dX) = rp exact
    gram = None
    if m:
        G = sum((E @ E.T).toarray() for E in ops)
        gram = sla.cho_factor(G, lower=True, check_finite=False)

    # internal form: minimize <Cm, X>, A(X) = b, A*(y) + Z = Cm
    Cm = [-c for c in p.c]
    a_norms = np.zeros(m)
    for E in ops:
        a_norms += np.asarray(E.multiply(E).sum(axis=1)).reshape(-1)
    a_norms = np.sqrt(a_norms)
    c_norm = math.sqrt(sum(float(np.sum(c * c)) for c in Cm))
    zeta = max(10.0, math.sqrt(n_tot), float(np.max((1.0 + np.abs(b)) / (1.0 + a_norms), initial=1.0)) * n_tot)
    eta = max(10.0, math.sqrt(n_tot), c_norm, float(np.max(a_norms, initial=0.0)))
    X = [zeta * np.eye(d) for d in dims]
    Z = [eta * np.eye(d) for d in dims]
    y = np.zeros(m)

    history: list[dict] = []
    status = Status.MAX_ITER
    best = None
    reg = opts.reg_start
    it = 0
    stall = 0

    def measures(X, y, Z):
        rp = b - _apply(ops, X) if m else np.zeros(0)
        aty = _adjoint(ops, y, dims) if m else [np.zeros((d, d)) for d in dims]
        Rd = [cm - z - a for cm, z, a in zip(Cm, Z, aty)]
        pobj = -sum(float(np.sum(c * x)) for c, x in zip(Cm, X))
        dobj = -float(b @ y)
        pres = float(np.max(np.abs(rp), initial=0.0))
        dres = max(float(np.max(np.abs(r))) for r in Rd)
        gap = abs(pobj - dobj) / (1.0 + abs(dobj))
        return rp, Rd, pobj, dobj, pres, dres, gap

    for it in range(1, opts.max_iter + 1):
        rp, Rd, pobj, dobj, pres, dres, gap = measures(X, y, Z)
        mu = sum(float(np.sum(x * z)) for x, z in zip(X, Z)) / n_tot
        history.append(dict(iter=it - 1, pobj=pobj, dobj=dobj, pres=pres, dres=dres, gap=gap, mu=mu))
        log.log(logging.INFO if opts.verbose else logging.DEBUG,
                "it %3d  pobj % .10e  dobj % .10e  pres %.2e  dres %.2e  gap %.2e",
                it - 1, pobj, dobj, pres, dres, gap)
        merit = max(pres, dres, gap)
        if best is None or merit < best[0]:
            best = (merit, [x.copy() for x in X], y.copy(), [z.copy() for z in Z], it - 1)
        if pres <= opts.tol and dres <= opts.tol and gap <= opts.tol:
            status = Status.OPTIMAL
            break
        if abs(dobj) > 1e10 * (1.0 + abs(pobj)) and pres > 1e-3:
            status = Status.INFEASIBLE
            break

        try:
            scal = [_nt_scaling(x, z) for x, z in zip(X, Z)]
        except (np.linalg.LinAlgError, ValueError):
            status = Status.NUMERICAL_FAILURE
            break
        # M = B B^T with rows B_i = vec(G^T A_i G); a QR of B^T gives the factor
        # without squaring the condition number
        Bt = np.hstack([
            (E @ np.kron(G, G)) if E.nnz else np.zeros((m, len(G) ** 2))
            for E, (G, _, _) in zip(ops, scal)
        ]).T if m else np.zeros((0, 0))
        factor = None
        if m:
            R = sla.qr(Bt, mode="r", check_finite=False)[0][:m]
            rdiag = np.abs(np.diag(R))
            if np.all(np.isfinite(R)) and rdiag.min() > 1e-14 * rdiag.max():
                factor = (R, False)
            else:
                M = Bt.T @ Bt
                M = 0.5 * (M + M.T)
                scale = max(1.0, float(np.max(np.abs(np.diag(M)), initial=1.0)))
                for r in [reg * 10.0 ** k for k in range(int(round(math.log10(opts.reg_max / reg))) + 1)]:
                    try:
                        factor = sla.cho_factor(M + r * scale * np.eye(m), lower=True, check_finite=False)
                        break
                    except np.linalg.LinAlgError:
                        continue
            if factor is None or not np.all(np.isfinite(factor[0])):
                status = Status.NUMERICAL_FAILURE
                break

        diag: dict = {}
        W = [G @ G.T for G, _, _ in scal]
        WRdW = [w @ rd @ w for w, rd in zip(W, Rd)]

        def direction(Rs):
            """Newton step for scaled complementarity right-hand sides ``Rs``."""
            GRG = []
            for (G, _, d), rs in zip(scal, Rs):
                h = 2.0 * rs / (d[:, None] + d[None, :])
                GRG.append(G @ h @ G.T)
            rhs = rp - _apply(ops, GRG) + _apply(ops, WRdW) if m else np.zeros(0)
            dy = np.zeros(m)
            res = rhs
            if m:
                for _ in range(opts.refine_steps + 1):
                    dy = dy + sla.cho_solve(factor, res, check_finite=False)
                    res = rhs - Bt.T @ (Bt @ dy)
                    if np.max(np.abs(res)) <= 1e-15 * (1.0 + np.max(np.abs(rhs))):
                        break
            aty = _adjoint(ops, dy, dims) if m else [np.zeros((d, d)) for d in dims]
            dZ = [rd - a for rd, a in zip(Rd, aty)]
            dX = []
            for g, w, dz in zip(GRG, W, dZ):
                d = g - w @ dz @ w
                dX.append(0.5 * (d + d.T))
            if m:
                # Schur round-off leaks into dX; project back onto A(dX) = rp
                miss = rp - _apply(ops, dX)
                corr = sla.cho_solve(gram, miss, check_finite=False)
                dX = [dx + a for dx, a in zip(dX, _adjoint(ops, corr, dims))]
                diag["miss"] = float(np.max(np.abs(miss)))
                diag["schur_res"] = float(np.max(np.abs(res)))
            return dX, dy, dZ

        def scaled(dX, dZ):
            return ([Gi @ dx @ Gi.T for (_, Gi, _), dx in zip(scal, dX)],
                    [G.T @ dz @ G for (G, _, _), dz in zip(scal, dZ)])

        def steps(dX, dZ):
            try:
                ap = min(min(_max_step(x, dx) for x, dx in zip(X, dX)) * opts.step_fraction, 1.0)
                ad = min(min(_max_step(z, dz) for z, dz in zip(Z, dZ)) * opts.step_fraction, 1.0)
            except np.linalg.LinAlgError:
                return 0.0, 0.0
            return ap, ad

        lam2 = [np.diag(d * d) for _, _, d in scal]
        dXa, dya, dZa = direction([-l2 for l2 in lam2])
        ap, ad = steps(dXa, dZa)
        mu_aff = sum(float(np.sum((x + ap * dx) * (z + ad * dz))) for x, dx, z, dz in zip(X, dXa, Z, dZa)) / n_tot
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3)) if mu > 0 else 0.0
        sxa, sza = scaled(dXa, dZa)
        Rs = [sigma * mu * np.eye(len(l2)) - l2 - 0.5 * (a @ b + b @ a) for l2, a, b in zip(lam2, sxa, sza)]
        dX, dy, dZ = direction(Rs)
        ap, ad = steps(dX, dZ)
        if min(ap, ad) < opts.recenter_below:
            # lost centrality: try a plain centering step instead
            cand = direction([mu * np.eye(len(l2)) - l2 for l2 in lam2])
            ap2, ad2 = steps(cand[0], cand[2])
            if min(ap2, ad2) > min(ap, ad):
                (dX, dy, dZ), ap, ad, sigma = cand, ap2, ad2, 1.0
        if ap < 1e-10 and ad < 1e-10:
            stall += 1
            if stall >= 3:
                status = Status.NUMERICAL_FAILURE
                break
        else:
            stall = 0
        history[-1].update(ap=ap, ad=ad, sigma=sigma, **diag)
        X = [x + ap * dx for x, dx in zip(X, dX)]
        X = [0.5 * (x + x.T) for x in X]
        y = y + ad * dy
        Z = [z + ad * dz for z, dz in zip(Z, dZ)]
        Z = [0.5 * (z + z.T) for z in Z]
    else:
        it = opts.max_iter + 1

    if status is not Status.OPTIMAL and best is not None:
        _, X, y, Z, _ = best
    rp, Rd, pobj, dobj, pres, dres, gap = measures(X, y, Z)
    # report in the maximization convention: y_out = -y, S = Z
    return SdpSolution(
        x_blocks=X, y=-y, s_blocks=Z, status=status, gap=gap, primal_res=pres, dual_res=dres,
        primal_obj=pobj, dual_obj=dobj, iterations=it - 1, dropped_rows=dropped, history=history,
    )


def solve_or_raise(p: SdpProblem, opts: SolverOptions | None = None, accept_max_iter: float = 1e-5) -> SdpSolution:
    """Like :func:`solve` but raises :class:`SolverError` on failure.

    A non-optimal exit is accepted when every residual and the gap are
    below ``accept_max_iter``; this covers problems whose optimum sits on a
    face with no strictly feasible point, where the last digits stall.
    """
    sol = solve(p, opts)
    if sol.optimal:
        return sol
    worst = max(sol.gap, sol.primal_res, sol.dual_res)
    if sol.status in (Status.MAX_ITER, Status.NUMERICAL_FAILURE) and worst <= accept_max_iter:
        return sol
    raise SolverError(
        f"SDP solver stopped with status {sol.status.value}",
        diagnostics=dict(status=sol.status.value, gap=sol.gap, primal_res=sol.primal_res,
                         dual_res=sol.dual_res, iterations=sol.iterations),
    )


# --- SDPA sparse format -----------------------------------------------------

def write_sdpa(p: SdpProblem, fh) -> None:
    """Write ``p`` in SDPA sparse format.

    Lines after the header are ``mat block row col value`` with 1-based
    block/row/col indices and ``mat = 0`` for the objective; only the upper
    triangle is listed.  In SDPA terms the objective matrix is ``F0`` and
    constraint ``i`` is ``<F_i, Y> = c_i``.
    """
    fh.write(f"* seqbell SDP: maximize <F0,X> s.t. <Fi,X> = ci, X psd\n")
    fh.write(f"{p.m} = mDIM\n")
    fh.write(f"{len(p.block_dims)} = nBLOCK\n")
    fh.write(" ".join(str(d) for d in p.block_dims) + " = bLOCKsTRUCT\n")
    fh.write(" ".join(repr(float(v) + 0.0) for v in p.b) + "\n")
    for blk, c in enumerate(p.c):
        ii, jj = np.nonzero(np.triu(c))
        for i, j in zip(ii, jj):
            fh.write(f"0 {blk + 1} {i + 1} {j + 1} {float(c[i, j])!r}\n")
    for k in range(p.m):
        acc: dict[tuple[int, int, int], float] = {}
        for blk, i, j, v in p._rows[k]:
            i, j = min(i, j), max(i, j)
            acc[(blk, i, j)] = acc.get((blk, i, j), 0.0) + v
        for (blk, i, j), v in sorted(acc.items()):
            if v != 0.0:
                fh.write(f"{k + 1} {blk + 1} {i + 1} {j + 1} {float(v)!r}\n")


def read_sdpa(fh) -> SdpProblem:
    lines = []
    for raw in fh:
        line = raw.strip()
        if not line or line[0] in "*\"":
            continue
        lines.append(line)

    def head(line):
        for ch in ",(){}=":
            line = line.replace(ch, " ")
        return line.split()

    m = int(head(lines[0])[0])
    nblock = int(head(lines[1])[0])
    dims = [abs(int(v)) for v in head(lines[2])[:nblock]]
    rhs_tokens: list[str] = []
    pos = 3
    while len(rhs_tokens) < m:
        rhs_tokens.extend(head(lines[pos]))
        pos += 1
    rhs = [float(v) for v in rhs_tokens[:m]]
    p = SdpProblem(dims)
    rows: list[list[tuple[int, int, int, float]]] = [[] for _ in range(m)]
    for line in lines[pos:]:
        t = head(line)
        mat, blk, i, j, v = int(t[0]), int(t[1]) - 1, int(t[2]) - 1, int(t[3]) - 1, float(t[4])
        if mat == 0:
            p.add_objective(blk, i, j, v)
        else:
            rows[mat - 1].append((blk, i, j, v))
    for k in range(m):
        p.add_constraint(rows[k], rhs[k])
    return p
