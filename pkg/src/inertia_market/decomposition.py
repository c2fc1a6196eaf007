"""Period decomposition for branch-and-bound lower bounds.

The only rows coupling adjacent periods in the emitted programs are the
storage energy recursions. Dualizing exactly those rows splits the MIQP
into per-period subproblems whose commitment patterns can be enumerated
exactly. The resulting Lagrangian value is a valid lower bound that keeps
the no-load costs integral, which is precisely where the plain QP
relaxation is weak.

The bound is evaluated once per multiplier vector (a table of certified
per-period, per-pattern values); branch-and-bound nodes then price any
partial commitment fixing with table lookups only.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .programs import LinearRow, QuadraticProgram, eliminate_columns
from .qp import SolverSettings, solve_qp

__all__ = ["PeriodDecomposition"]

_PERIOD_RE = re.compile(r"[,\[](\d+)\]$")
_MAX_PATTERNS = 64
_COUPLING_TAG = "es-energy-balance"


def _period_of(label: str) -> Optional[int]:
    m = _PERIOD_RE.search(label)
    return int(m.group(1)) if m else None


def interval_infeasible(program: QuadraticProgram, rounds: int = 3) -> bool:
    """Prove infeasibility by interval propagation over the rows, if possible.

    Conservative: returns True only when some row cannot be satisfied for any
    point in the propagated variable boxes.
    """
    n = program.num_vars
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    rows = [(r, False) for r in program.ineq_rows] + [(r, True) for r in program.eq_rows]

    for _ in range(rounds):
        changed = False
        for row, is_eq in rows:
            if not row.coeffs:
                continue
            mins = np.array(
                [c * (lo[j] if c > 0 else hi[j]) for j, c in row.coeffs]
            )
            maxs = np.array(
                [c * (hi[j] if c > 0 else lo[j]) for j, c in row.coeffs]
            )
            total_min = mins.sum()
            total_max = maxs.sum()
            for idx, (j, c) in enumerate(row.coeffs):
                rest_min = total_min - mins[idx]
                if np.isfinite(rest_min):
                    # c*x <= rhs - rest_min
                    bound = (row.rhs - rest_min) / c
                    if c > 0 and bound < hi[j] - 1e-12:
                        hi[j] = bound
                        changed = True
                    elif c < 0 and bound > lo[j] + 1e-12:
                        lo[j] = bound
                        changed = True
                if is_eq:
                    rest_max = total_max - maxs[idx]
                    if np.isfinite(rest_max):
                        # c*x >= rhs - rest_max
                        bound = (row.rhs - rest_max) / c
                        if c > 0 and bound > lo[j] + 1e-12:
                            lo[j] = bound
                            changed = True
                        elif c < 0 and bound < hi[j] - 1e-12:
                            hi[j] = bound
                            changed = True
            if np.any(lo > hi + 1e-9):
                return True
        if not changed:
            break

    feas_tol = 1e-9
    for row, is_eq in rows:
        if not row.coeffs:
            if (is_eq and abs(row.rhs) > feas_tol) or (not is_eq and row.rhs < -feas_tol):
                return True
            continue
        total_min = sum(c * (lo[j] if c > 0 else hi[j]) for j, c in row.coeffs)
        total_max = sum(c * (hi[j] if c > 0 else lo[j]) for j, c in row.coeffs)
        if total_min > row.rhs + 1e-7:
            return True
        if is_eq and total_max < row.rhs - 1e-7:
            return True
    return False


@dataclass
class _PeriodTemplate:
    period: int
    columns: tuple[str, ...]
    quad: dict
    lin0: np.ndarray
    eq_rows: tuple[LinearRow, ...]
    ineq_rows: tuple[LinearRow, ...]
    binary_local: tuple[int, ...]          # local columns, ordered by resource key
    eta_matrix: "np.ndarray | object"      # (n_local, n_eta) sparse-ish dense map


class PeriodDecomposition:
    """Exact per-period pattern tables for Lagrangian lower bounds."""

    def __init__(self, program: QuadraticProgram, settings: SolverSettings):
        self.program = program
        self.settings = SolverSettings(
            tolerance=max(settings.tolerance, 1e-7),
            max_iterations=80,
            regularization=settings.regularization,
        )
        self.ok = False
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self) -> None:
        prog = self.program
        periods = [_period_of(name) for name in prog.columns]
        if any(p is None for p in periods):
            return
        self.T = max(periods) + 1
        T = self.T

        # Coupling rows must be the storage recursions and touch only (t-1, t).
        self.coupling: list[LinearRow] = []
        self.coupling_key: dict[str, int] = {}
        eq_by_t: dict[int, list[LinearRow]] = {t: [] for t in range(T)}
        ineq_by_t: dict[int, list[LinearRow]] = {t: [] for t in range(T)}
        for row in prog.eq_rows:
            t = _period_of(row.label)
            if row.tag == _COUPLING_TAG:
                self.coupling_key[row.label] = len(self.coupling)
                self.coupling.append(row)
                continue
            if t is None or any(periods[j] != t for j, _ in row.coeffs):
                return
            eq_by_t[t].append(row)
        for row in prog.ineq_rows:
            t = _period_of(row.label)
            if t is None or any(periods[j] != t for j, _ in row.coeffs):
                return
            ineq_by_t[t].append(row)
        for row in self.coupling:
            t = _period_of(row.label)
            if t is None or any(periods[j] not in (t, t - 1) for j, _ in row.coeffs):
                return
        for (i, j) in prog.quad:
            if periods[i] != periods[j]:
                return

        n_eta = len(self.coupling)
        self.rhs_eta = np.array([r.rhs for r in self.coupling])

        cols_by_t: dict[int, list[int]] = {t: [] for t in range(T)}
        for j, t in enumerate(periods):
            cols_by_t[t].append(j)

        bins_by_t: dict[int, list[int]] = {t: [] for t in range(T)}
        for c in prog.binary_vars:
            key = prog.binary_keys.get(c)
            if key is None:
                return
            bins_by_t[periods[c]].append(c)
        if any(2 ** len(v) > _MAX_PATTERNS for v in bins_by_t.values()):
            return

        self.templates: list[_PeriodTemplate] = []
        for t in range(T):
            cols = cols_by_t[t]
            remap = {old: new for new, old in enumerate(cols)}
            names = tuple(prog.columns[j] for j in cols)
            lin0 = np.array([prog.lin[j] for j in cols])
            quad = {
                (remap[i], remap[j]): v
                for (i, j), v in prog.quad.items()
                if i in remap
            }
            eta_mat = np.zeros((len(cols), n_eta))
            for k, row in enumerate(self.coupling):
                for j, c in row.coeffs:
                    if periods[j] == t:
                        eta_mat[remap[j], k] += c

            def conv(rows: Sequence[LinearRow]) -> tuple[LinearRow, ...]:
                return tuple(
                    LinearRow(r.label, tuple((remap[j], c) for j, c in r.coeffs), r.rhs)
                    for r in rows
                )

            ordered_bins = sorted(
                bins_by_t[t], key=lambda c: prog.binary_keys[c]
            )
            self.templates.append(
                _PeriodTemplate(
                    period=t,
                    columns=names,
                    quad=quad,
                    lin0=lin0,
                    eq_rows=conv(eq_by_t[t]),
                    ineq_rows=conv(ineq_by_t[t]),
                    binary_local=tuple(remap[c] for c in ordered_bins),
                    eta_matrix=eta_mat,
                )
            )
        # Base binary columns per period in the same resource order.
        self.bins_base = [
            sorted(bins_by_t[t], key=lambda c: prog.binary_keys[c]) for t in range(T)
        ]
        self.ok = True

    # -- evaluation --------------------------------------------------------

    def evaluate(self, eta: np.ndarray):
        """Solve every per-period pattern at multipliers ``eta``.

        Returns (table, argmin info). ``table[t]`` maps pattern bits to a
        certified lower value (inf when infeasible). Pattern feasibility and
        the eliminated subprogram structure do not depend on ``eta`` and are
        cached across calls; only the linear objective is refreshed.
        """
        if not hasattr(self, "_subs"):
            self._subs: list[dict] = [dict() for _ in self.templates]
        table: list[dict[tuple[int, ...], float]] = []
        arg: list = []
        for t, tmpl in enumerate(self.templates):
            lin = tmpl.lin0 + tmpl.eta_matrix @ eta
            cache = self._subs[t]
            values: dict[tuple[int, ...], float] = {}
            best_val = np.inf
            best = None
            for bits in itertools.product((0, 1), repeat=len(tmpl.binary_local)):
                entry = cache.get(bits, "new")
                if entry is None:
                    values[bits] = np.inf
                    continue
                if entry == "new":
                    fixes = {c: float(v) for c, v in zip(tmpl.binary_local, bits)}
                    base = QuadraticProgram(
                        columns=tmpl.columns,
                        quad=tmpl.quad,
                        lin=lin,
                        const=0.0,
                        eq_rows=tmpl.eq_rows,
                        ineq_rows=tmpl.ineq_rows,
                        binary_vars=frozenset(),
                    )
                    sub = eliminate_columns(base, fixes)
                    kept = [j for j in range(len(tmpl.columns)) if j not in fixes]
                    if interval_infeasible(sub):
                        cache[bits] = None
                        values[bits] = np.inf
                        continue
                    cache[bits] = (sub, kept)
                else:
                    sub0, kept = entry
                    # Binary columns carry no multiplier terms, so the
                    # elimination constant and rows are eta-invariant.
                    sub = replace(sub0, lin=lin[kept])
                sol = solve_qp(sub, self.settings)
                if sol.status == "infeasible":
                    cache[bits] = None
                    values[bits] = np.inf
                    continue
                if sol.status != "optimal":
                    values[bits] = np.inf
                    continue
                values[bits] = sol.certified_lower_bound()
                if sol.objective < best_val:
                    best_val = sol.objective
                    best = (bits, sub, sol)
            table.append(values)
            arg.append(best)
        return table, arg

    def constant(self, eta: np.ndarray) -> float:
        return -float(eta @ self.rhs_eta)

    def bound_from_table(
        self, table, eta_const: float, fixes: dict[int, float]
    ) -> float:
        """Lagrangian bound for a node with the given base-column fixes."""
        total = eta_const
        for t, tmpl in enumerate(self.templates):
            base_bins = self.bins_base[t]
            best = np.inf
            for bits, val in table[t].items():
                if any(
                    base in fixes and fixes[base] != bits[k]
                    for k, base in enumerate(base_bins)
                ):
                    continue
                if val < best:
                    best = val
            if not np.isfinite(best):
                return np.inf
            total += best
        return total

    def argmin_assignment(self, table) -> Optional[dict[int, float]]:
        """Commitment assignment from the per-period minima (heuristic seed)."""
        out: dict[int, float] = {}
        for t in range(self.T):
            best = None
            best_val = np.inf
            for bits, val in table[t].items():
                if val < best_val:
                    best_val = val
                    best = bits
            if best is None:
                return None
            for k, base in enumerate(self.bins_base[t]):
                out[base] = float(best[k])
        return out

    def subgradient(self, arg) -> np.ndarray:
        """Recursion-row violations at the per-period argmins."""
        g = np.zeros(len(self.coupling))
        value_of: dict[str, float] = {}
        for t, entry in enumerate(arg):
            if entry is None:
                continue
            bits, sub, sol = entry
            for name, v in zip(sub.columns, sol.primal):
                value_of[name] = float(v)
            for c, bit in zip(self.templates[t].binary_local, bits):
                value_of[self.templates[t].columns[c]] = float(bit)
        for k, row in enumerate(self.coupling):
            acc = -row.rhs
            for j, c in row.coeffs:
                acc += c * value_of.get(self.program.columns[j], 0.0)
            g[k] = acc
        return g

    def ascend(
        self,
        eta0: np.ndarray,
        upper_bound: float,
        max_steps: int = 8,
    ):
        """Polyak subgradient ascent on the Lagrangian dual from ``eta0``.

        Returns (best_bound_constant, best_table, best_eta). Deterministic.
        """
        eta = eta0.copy()
        best_eta = eta0.copy()
        table, arg = self.evaluate(eta)
        best_table = table
        best_val = self.constant(eta) + sum(
            min(v.values()) if v else 0.0 for v in table
        )
        theta = 1.0
        for _ in range(max_steps):
            g = self.subgradient(arg)
            norm2 = float(g @ g)
            if norm2 < 1e-16 or not np.isfinite(upper_bound):
                break
            gap = upper_bound - best_val
            if gap <= 0:
                break
            step = theta * gap / norm2
            eta = eta + step * g
            table, arg = self.evaluate(eta)
            val = self.constant(eta) + sum(min(v.values()) for v in table)
            if val > best_val + 1e-9:
                best_val = val
                best_table = table
                best_eta = eta.copy()
            else:
                theta *= 0.5
                if theta < 0.05:
                    break
        return best_val, best_table, best_eta
