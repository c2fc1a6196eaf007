"""Mixed-integer QP solving: best-first branch and bound over commitment
binaries, plus an exhaustive-enumeration oracle for small instances.

Branching is most-fractional with ties broken by the smallest (resource,
period) key; nodes are ordered by bound with a deterministic counter, so
identical inputs explore identical trees. Children inherit the parent primal
and inequality duals as warm starts, and binaries whose reduced cost already
prices them out of the incumbent window are fixed for the whole subtree.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .programs import (
    QuadraticProgram,
    eliminate_columns,
    fix_commitment,
    with_unit_interval_rows,
)
from .qp import QpSolution, SolverSettings, solve_qp

__all__ = ["MiqpSettings", "MiqpSolution", "solve_miqp", "exhaustive_solve"]

_INT_TOL = 1e-6
_EXHAUSTIVE_CAP = 20
_HEURISTIC_PERIOD = 8       # try a rounding heuristic every k-th node


@dataclass(frozen=True)
class MiqpSettings:
    gap_tol: float = 1e-6
    node_limit: int = 100000
    time_limit: Optional[float] = None     # seconds; None = unlimited
    qp_settings: SolverSettings = SolverSettings()

    @property
    def node_qp_settings(self) -> SolverSettings:
        # Node relaxations only feed bounds; they may run a bit looser than
        # the final fixed-commitment solve.
        return SolverSettings(
            tolerance=max(self.qp_settings.tolerance, 1e-7),
            max_iterations=self.qp_settings.max_iterations,
            regularization=self.qp_settings.regularization,
        )


@dataclass
class MiqpSolution:
    status: str                    # optimal | infeasible | limits
    commitment: np.ndarray         # 0/1 by sorted binary column order
    relaxed_solution: Optional[QpSolution]
    objective: float
    gap: float
    nodes_explored: int

    def commitment_by_name(self, program: QuadraticProgram) -> dict[str, int]:
        cols = sorted(program.binary_vars)
        return {program.columns[c]: int(v) for c, v in zip(cols, self.commitment)}


def _binary_order(program: QuadraticProgram) -> list[int]:
    """Binary columns sorted by their (resource, period) key."""
    return sorted(
        program.binary_vars, key=lambda c: program.binary_keys.get(c, (c, 0))
    )


def _fixed_qp(
    program: QuadraticProgram, fixes: dict[int, float], settings: SolverSettings
) -> QpSolution:
    return solve_qp(eliminate_columns(program, fixes), settings)


def _finalize(
    program: QuadraticProgram,
    assignment: dict[int, float],
    settings: SolverSettings,
) -> tuple[np.ndarray, QpSolution]:
    cols = sorted(program.binary_vars)
    u_star = np.array([assignment[c] for c in cols])
    fixed = fix_commitment(program, u_star)
    return u_star.astype(int), solve_qp(fixed, settings)


def solve_miqp(
    program: QuadraticProgram, settings: Optional[MiqpSettings] = None
) -> MiqpSolution:
    """Best-first branch and bound with QP relaxations.

    Node relaxations eliminate already-fixed binaries and box the remaining
    ones into [0, 1]. Incumbents come from integral relaxations and from
    periodic rounding probes; subtrees are cut once their bound cannot beat
    the incumbent by more than the gap tolerance.
    """
    st = settings or MiqpSettings()
    node_settings = st.node_qp_settings
    base_cols = sorted(program.binary_vars)
    if not base_cols:
        sol = solve_qp(program, st.qp_settings)
        status = "optimal" if sol.status == "optimal" else sol.status
        if sol.status not in ("optimal", "infeasible"):
            status = "limits"
        return MiqpSolution(
            status=status,
            commitment=np.zeros(0, dtype=int),
            relaxed_solution=sol,
            objective=sol.objective,
            gap=0.0 if sol.status == "optimal" else float("inf"),
            nodes_explored=1,
        )

    started = time.monotonic()
    incumbent_obj = float("inf")
    incumbent: Optional[dict[int, float]] = None
    nodes = 0
    counter = itertools.count()
    # Heap entries: (bound, tiebreak, fixes, warm (x by name, z by label)).
    heap: list = [(-float("inf"), next(counter), {}, None)]
    exhausted = True

    def cutoff() -> float:
        return incumbent_obj - st.gap_tol * max(1.0, abs(incumbent_obj))

    def try_incumbent(assignment: dict[int, float], value: float) -> None:
        nonlocal incumbent, incumbent_obj
        if value < incumbent_obj:
            incumbent_obj = value
            incumbent = dict(assignment)

    while heap:
        bound, tiebreak, fixes, warm = heapq.heappop(heap)
        if bound >= cutoff():
            continue
        if nodes >= st.node_limit or (
            st.time_limit is not None and time.monotonic() - started > st.time_limit
        ):
            exhausted = False
            heapq.heappush(heap, (bound, tiebreak, fixes, warm))
            break
        nodes += 1

        node_prog = eliminate_columns(program, fixes)
        free_bins = _binary_order(node_prog)
        relaxed = with_unit_interval_rows(node_prog, free_bins)
        warm_x = warm_z = None
        if warm is not None:
            x_map, z_map = warm
            warm_x = np.array([x_map.get(name, 0.0) for name in relaxed.columns])
            warm_z = np.array([z_map.get(row.label, 1.0) for row in relaxed.ineq_rows])
        sol = solve_qp(relaxed, node_settings, warm_start=warm_x, warm_ineq_duals=warm_z)

        if sol.status == "infeasible":
            continue
        trusted = sol.status == "optimal"
        node_bound = max(bound, sol.certified_lower_bound()) if trusted else bound
        if node_bound >= cutoff():
            continue

        fractional = [
            c for c in free_bins if abs(sol.primal[c] - round(sol.primal[c])) > _INT_TOL
        ]

        if trusted and not fractional:
            assignment = dict(fixes)
            for c in free_bins:
                base = program.var_index[node_prog.columns[c]]
                assignment[base] = float(round(sol.primal[c]))
            try_incumbent(assignment, sol.objective)
            continue

        if trusted and fractional and nodes % _HEURISTIC_PERIOD == 1:
            # Rounding probe. Rounding up is always inertia-feasible, so fall
            # back to it when nearest-rounding is infeasible.
            for threshold in (0.5, _INT_TOL):
                probe_fix = dict(fixes)
                for c in free_bins:
                    base = program.var_index[node_prog.columns[c]]
                    probe_fix[base] = 1.0 if sol.primal[c] > threshold else 0.0
                probe = _fixed_qp(program, probe_fix, node_settings)
                if probe.status == "optimal":
                    try_incumbent(probe_fix, probe.objective)
                    break

        if not free_bins:
            continue
        if fractional:
            branch_node_col = max(
                fractional,
                key=lambda c: (
                    abs(sol.primal[c] - round(sol.primal[c])),
                    tuple(-k for k in node_prog.binary_keys.get(c, (c, 0))),
                ),
            )
        else:
            branch_node_col = free_bins[0]
        branch_base = program.var_index[node_prog.columns[branch_node_col]]

        # Reduced-cost fixing: a binary resting on its box bound whose bound
        # dual exceeds the remaining slack to the cutoff can never flip in
        # this subtree.
        child_fixes = dict(fixes)
        if trusted and incumbent is not None:
            margin = cutoff() - node_bound
            zmap = {row.label: float(zv) for row, zv in zip(relaxed.ineq_rows, sol.ineq_duals)}
            for c in free_bins:
                if c == branch_node_col:
                    continue
                name = node_prog.columns[c]
                v = sol.primal[c]
                if v < _INT_TOL and zmap.get(f"relax-lower[{name}]", 0.0) > margin:
                    child_fixes[program.var_index[name]] = 0.0
                elif v > 1.0 - _INT_TOL and zmap.get(f"relax-upper[{name}]", 0.0) > margin:
                    child_fixes[program.var_index[name]] = 1.0

        warm_map = None
        if trusted:
            warm_map = (
                {name: float(v) for name, v in zip(relaxed.columns, sol.primal)},
                {row.label: float(zv) for row, zv in zip(relaxed.ineq_rows, sol.ineq_duals)},
            )
        for val in (0.0, 1.0):
            child = dict(child_fixes)
            child[branch_base] = val
            heapq.heappush(heap, (node_bound, next(counter), child, warm_map))

    if incumbent is None:
        return MiqpSolution(
            status="infeasible" if exhausted else "limits",
            commitment=np.zeros(len(base_cols), dtype=int),
            relaxed_solution=None,
            objective=float("inf"),
            gap=float("inf"),
            nodes_explored=nodes,
        )

    commitment, relaxed_solution = _finalize(program, incumbent, st.qp_settings)
    if exhausted or not heap:
        gap = 0.0
        status = "optimal"
    else:
        lowest = min(entry[0] for entry in heap)
        gap = max(0.0, (incumbent_obj - lowest) / max(1.0, abs(incumbent_obj)))
        status = "optimal" if gap <= st.gap_tol else "limits"
    return MiqpSolution(
        status=status,
        commitment=commitment,
        relaxed_solution=relaxed_solution,
        objective=relaxed_solution.objective,
        gap=gap,
        nodes_explored=nodes,
    )


def exhaustive_solve(
    program: QuadraticProgram, settings: Optional[MiqpSettings] = None
) -> MiqpSolution:
    """Enumerate every binary assignment and keep the best feasible QP.

    Hard-capped at 20 binaries. Assignments are visited in lexicographic
    order over the (resource, period)-sorted commitment vector, and only a
    strictly better objective replaces the incumbent, so ties resolve to the
    lexicographically smallest commitment.
    """
    st = settings or MiqpSettings()
    ordered = _binary_order(program)
    k = len(ordered)
    if k > _EXHAUSTIVE_CAP:
        raise ValueError(f"exhaustive enumeration capped at {_EXHAUSTIVE_CAP} binaries, got {k}")
    if k == 0:
        return solve_miqp(program, st)

    best_obj = float("inf")
    best_assignment: Optional[dict[int, float]] = None
    solves = 0
    for bits in itertools.product((0.0, 1.0), repeat=k):
        fixes = dict(zip(ordered, bits))
        sol = _fixed_qp(program, fixes, st.qp_settings)
        solves += 1
        if sol.status == "optimal" and sol.objective < best_obj:
            best_obj = sol.objective
            best_assignment = fixes

    if best_assignment is None:
        return MiqpSolution(
            status="infeasible",
            commitment=np.zeros(k, dtype=int),
            relaxed_solution=None,
            objective=float("inf"),
            gap=float("inf"),
            nodes_explored=solves,
        )
    commitment, relaxed_solution = _finalize(program, best_assignment, st.qp_settings)
    return MiqpSolution(
        status="optimal",
        commitment=commitment,
        relaxed_solution=relaxed_solution,
        objective=relaxed_solution.objective,
        gap=0.0,
        nodes_explored=solves,
    )
