"""Convex QP solver: primal-dual interior point with Mehrotra
predictor-corrector steps.

Solves

    minimize    0.5 x'Qx + q'x + c
    subject to  Ax = b   (duals y)
                Gx <= h  (duals z >= 0, slacks s >= 0)

with the Lagrangian convention L = f + y'(Ax - b) + z'(Gx - h), i.e. the
stationarity condition is Qx + q + A'y + G'z = 0. Each iteration factors a
statically regularized augmented system; the sparsity skeleton is assembled
once and only the barrier-dependent values change, and every solve gets one
round of iterative refinement. Ordering is fixed, so identical inputs yield
identical iterates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .programs import QuadraticProgram

__all__ = ["SolverSettings", "QpSolution", "solve_qp", "kkt_residuals"]

_SPARSE_CUTOFF = 260      # augmented systems above this size go through SuperLU
_STEP_FRACTION = 0.99
_DIVERGENCE_NORM = 1e8


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-8
    max_iterations: int = 200
    regularization: float = 1e-10

    def __post_init__(self) -> None:
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class QpSolution:
    status: str                      # optimal | infeasible | unbounded | max_iter
    primal: np.ndarray
    eq_duals: np.ndarray
    ineq_duals: np.ndarray
    slacks: np.ndarray
    objective: float
    residuals: dict[str, float]
    iterations: int
    program: QuadraticProgram

    def value(self, name: str) -> float:
        return float(self.primal[self.program.var_index[name]])

    def eq_dual(self, label: str) -> float:
        return float(self.eq_duals[self.program.eq_index[label]])

    def ineq_dual(self, label: str) -> float:
        return float(self.ineq_duals[self.program.ineq_index[label]])

    def ineq_slack(self, label: str) -> float:
        row = self.program.ineq_rows[self.program.ineq_index[label]]
        return float(row.rhs - row.value(self.primal))

    def certified_lower_bound(self) -> float:
        """Objective minus the complementarity total: a near-dual value usable
        as a safe bound in branch and bound."""
        return self.objective - float(self.slacks @ self.ineq_duals) - 10.0 * (
            self.residuals.get("dual_feas", 0.0) * (1.0 + float(np.sum(np.abs(self.primal))))
        )


class _AugmentedSolver:
    """Factor/solve the regularized system [[Q + G'WG + dI, A'], [A, -dI]]."""

    def __init__(self, Q, A, G, reg: float):
        self.n = Q.shape[0]
        self.me = A.shape[0]
        self.mi = G.shape[0]
        self.reg = max(reg, 1e-10)
        self.size = self.n + self.me
        self.sparse = self.size > _SPARSE_CUTOFF
        self._factor = None
        self._matrix = None
        if not self.sparse:
            self.Q = np.asarray(Q)
            self.A = A.toarray()
            self.G = G.toarray()
            return
        self.Q = sp.csr_matrix(Q)
        self.A = A.tocsr()
        self.G = G.tocsr()
        self._build_skeleton()

    def _build_skeleton(self) -> None:
        n, me = self.n, self.me
        Qc = sp.coo_matrix(self.Q)
        rows = [Qc.row, np.arange(n)]
        cols = [Qc.col, np.arange(n)]
        fixed = [Qc.data, np.full(n, self.reg)]

        # G'WG block: value p of the pattern equals (S @ W)[p].
        g = self.G
        u_pos: dict[tuple[int, int], int] = {}
        u_rows: list[int] = []
        u_cols: list[int] = []
        s_rows: list[int] = []
        s_cols: list[int] = []
        s_vals: list[float] = []
        for i in range(self.mi):
            lo, hi = g.indptr[i], g.indptr[i + 1]
            idx = g.indices[lo:hi]
            val = g.data[lo:hi]
            for a in range(len(idx)):
                for bb in range(len(idx)):
                    key = (int(idx[a]), int(idx[bb]))
                    p = u_pos.get(key)
                    if p is None:
                        p = len(u_rows)
                        u_pos[key] = p
                        u_rows.append(key[0])
                        u_cols.append(key[1])
                    s_rows.append(p)
                    s_cols.append(i)
                    s_vals.append(float(val[a] * val[bb]))
        self._S = sp.csr_matrix(
            (s_vals, (s_rows, s_cols)), shape=(len(u_rows), self.mi)
        )
        rows.append(np.asarray(u_rows, dtype=np.int64))
        cols.append(np.asarray(u_cols, dtype=np.int64))
        self._w_slot = slice(
            sum(len(r) for r in rows[:-1]), sum(len(r) for r in rows)
        )
        fixed.append(np.zeros(len(u_rows)))

        if me:
            Ac = sp.coo_matrix(self.A)
            rows.extend([Ac.row + n, Ac.col, np.arange(me) + n])
            cols.extend([Ac.col, Ac.row + n, np.arange(me) + n])
            fixed.extend([Ac.data, Ac.data, np.full(me, -self.reg)])

        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._base = np.concatenate(fixed)

    def factor(self, W: np.ndarray) -> None:
        n, me = self.n, self.me
        if self.sparse:
            data = self._base.copy()
            if self.mi:
                data[self._w_slot] += self._S @ W
            M = sp.csc_matrix(
                (data, (self._rows, self._cols)), shape=(self.size, self.size)
            )
            self._matrix = M
            self._factor = spla.splu(M)
        else:
            H = self.Q + (self.G.T * W) @ self.G + self.reg * np.eye(n)
            M = np.zeros((n + me, n + me))
            M[:n, :n] = H
            if me:
                M[:n, n:] = self.A.T
                M[n:, :n] = self.A
                M[n:, n:] = -self.reg * np.eye(me)
            self._matrix = M
            self._factor = sla.lu_factor(M)

    def solve(self, rhs_x: np.ndarray, rhs_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rhs = np.concatenate([rhs_x, rhs_y]) if self.me else rhs_x
        if self.sparse:
            sol = self._factor.solve(rhs)
            resid = rhs - self._matrix @ sol
            sol = sol + self._factor.solve(resid)
        else:
            sol = sla.lu_solve(self._factor, rhs)
            resid = rhs - self._matrix @ sol
            sol = sol + sla.lu_solve(self._factor, resid)
        return sol[: self.n], sol[self.n :]


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest step in (0, 1] keeping v + a*dv >= 0."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(
    program: QuadraticProgram,
    settings: Optional[SolverSettings] = None,
    warm_start: Optional[np.ndarray] = None,
    warm_ineq_duals: Optional[np.ndarray] = None,
) -> QpSolution:
    """Solve a convex QP to high accuracy, returning duals for every row."""
    if program.binary_vars:
        raise ValueError("program still contains binary variables; fix or relax them first")
    st = settings or SolverSettings()
    Q, q, A, b, G, h = program.matrices
    n = program.num_vars
    me, mi = len(b), len(h)

    # Structurally decided rows (can appear after variable elimination).
    for row in program.eq_rows:
        if not row.coeffs and abs(row.rhs) > 1e-9:
            return _empty_solution(program, "infeasible", n, me, mi)
    for row in program.ineq_rows:
        if not row.coeffs and row.rhs < -1e-9:
            return _empty_solution(program, "infeasible", n, me, mi)

    solver = _AugmentedSolver(Q, A, G, st.regularization)
    scale_p = 1.0 + max(
        float(np.max(np.abs(b))) if me else 0.0, float(np.max(np.abs(h))) if mi else 0.0
    )
    scale_d = 1.0 + float(np.max(np.abs(q))) if n else 1.0
    comp_target = 10.0 * st.tolerance

    if warm_start is not None and len(warm_start) == n:
        x = np.asarray(warm_start, dtype=float).copy()
        y = np.zeros(me)
    else:
        solver.factor(np.ones(mi) if mi else np.zeros(0))
        x, y = solver.solve(-q + (G.T @ h if mi else 0.0), b)
    if mi:
        s_try = h - G @ x
        shift = max(0.0, -float(np.min(s_try))) + 1.0
        s = s_try + shift
        if warm_ineq_duals is not None and len(warm_ineq_duals) == mi:
            z = np.clip(np.asarray(warm_ineq_duals, dtype=float), 1e-4, 1e6)
        else:
            z = np.ones(mi)
    else:
        s = np.zeros(0)
        z = np.zeros(0)

    status = "max_iter"
    iterations = 0

    for it in range(st.max_iterations):
        iterations = it + 1
        r_d = Q @ x + q + (A.T @ y if me else 0.0) + (G.T @ z if mi else 0.0)
        r_p = (A @ x - b) if me else np.zeros(0)
        gap_g = (G @ x - h) if mi else np.zeros(0)
        r_g = gap_g + s

        primal_feas = max(
            float(np.max(np.abs(r_p))) if me else 0.0,
            float(np.max(gap_g)) if mi else 0.0,
            0.0,
        )
        dual_feas = float(np.max(np.abs(r_d))) if n else 0.0
        comp = float(np.max(z * s)) if mi else 0.0

        if (
            primal_feas <= st.tolerance * scale_p
            and dual_feas <= st.tolerance * scale_d
            and comp <= comp_target
        ):
            status = "optimal"
            break

        if program.objective_value(x) < -1e13 * (1.0 + abs(program.const)):
            status = "unbounded"
            break

        dual_norm = max(
            float(np.max(np.abs(y))) if me else 0.0, float(np.max(np.abs(z))) if mi else 0.0
        )
        if dual_norm > _DIVERGENCE_NORM:
            total = (np.sum(np.abs(y)) if me else 0.0) + (np.sum(np.abs(z)) if mi else 0.0)
            cert = (A.T @ (y / total) if me else 0.0) + (G.T @ (z / total) if mi else 0.0)
            cert_val = (b @ y / total if me else 0.0) + (h @ z / total if mi else 0.0)
            if float(np.max(np.abs(cert))) <= 1e-6 and cert_val < -1e-10:
                status = "infeasible"
                break
            if dual_norm > 1e12:
                status = "infeasible" if primal_feas > st.tolerance * scale_p else "max_iter"
                break

        if mi == 0:
            # Pure equality-constrained QP: plain (regularized) Newton.
            solver.factor(np.zeros(0))
            dx, dy = solver.solve(-r_d, -r_p)
            x = x + dx
            y = y + dy
            continue

        mu = float(z @ s) / mi
        W = np.clip(z / np.maximum(s, 1e-300), 1e-14, 1e14)
        solver.factor(W)

        # Predictor (affine scaling) direction.
        v = W * r_g - z
        dx, dy = solver.solve(-r_d - G.T @ v, -r_p)
        dz = W * (G @ dx) + v
        ds = -r_g - G @ dx
        a_p = _max_step(s, ds)
        a_d = _max_step(z, dz)
        mu_aff = float((s + a_p * ds) @ (z + a_d * dz)) / mi
        sigma = min(1.0, max(0.0, (mu_aff / mu))) ** 3 if mu > 0 else 0.0

        # Corrector: recenter and cancel the second-order term.
        v = W * r_g - z + (sigma * mu - ds * dz) / np.maximum(s, 1e-300)
        dx, dy = solver.solve(-r_d - G.T @ v, -r_p)
        dz = W * (G @ dx) + v
        ds = -r_g - G @ dx

        alpha = _STEP_FRACTION * min(_max_step(s, ds), _max_step(z, dz))
        alpha = min(1.0, alpha)
        x = x + alpha * dx
        y = y + alpha * dy
        z = np.maximum(z + alpha * dz, 0.0)
        s = np.maximum(s + alpha * ds, 1e-300)

    residuals = _residual_record(Q, q, A, b, G, h, x, y, z)
    return QpSolution(
        status=status,
        primal=x,
        eq_duals=y,
        ineq_duals=z,
        slacks=(h - G @ x) if mi else np.zeros(0),
        objective=program.objective_value(x),
        residuals=residuals,
        iterations=iterations,
        program=program,
    )


def _empty_solution(program, status, n, me, mi):
    return QpSolution(
        status=status,
        primal=np.zeros(n),
        eq_duals=np.zeros(me),
        ineq_duals=np.zeros(mi),
        slacks=np.zeros(mi),
        objective=float("inf") if status == "infeasible" else float("-inf"),
        residuals={"primal_feas": float("inf"), "dual_feas": 0.0, "complementarity": 0.0},
        iterations=0,
        program=program,
    )


def _residual_record(Q, q, A, b, G, h, x, y, z) -> dict[str, float]:
    me, mi = len(b), len(h)
    r_d = Q @ x + q + (A.T @ y if me else 0.0) + (G.T @ z if mi else 0.0)
    primal = max(
        float(np.max(np.abs(A @ x - b))) if me else 0.0,
        float(np.max(G @ x - h)) if mi else 0.0,
        0.0,
    )
    comp = float(np.max(np.abs(z * (G @ x - h)))) if mi else 0.0
    dual_sign = float(np.max(-z)) if mi else 0.0
    return {
        "primal_feas": primal,
        "dual_feas": float(np.max(np.abs(r_d))) if len(x) else 0.0,
        "complementarity": comp,
        "dual_sign": max(0.0, dual_sign),
    }


def kkt_residuals(program: QuadraticProgram, solution: QpSolution) -> dict[str, float]:
    """Recompute KKT residual norms from the program rows, independent of the
    solver's internal bookkeeping."""
    Q, q, A, b, G, h = program.matrices
    return _residual_record(Q, q, A, b, G, h, solution.primal, solution.eq_duals, solution.ineq_duals)
