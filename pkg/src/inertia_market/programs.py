"""Deterministic-equivalent program construction.

Turns a system case plus a market-case configuration into a labeled
standard-form program: quantile safety margins replace the chance
constraints, the expectation of the quadratic cost becomes an explicit
quadratic form, and every constraint row carries a stable label such as
``gen-upper[G1,5]`` or ``inertia-req[12]`` so duals can be recovered by
name.

Objective convention: ``sum_{i<=j} quad[i,j] x_i x_j + lin . x + const``.
Inequalities are all written as ``<=`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtri

from .cases import (
    GeneratorSpec,
    MarketCaseConfig,
    StorageSpec,
    SystemCase,
    validate as validate_case,
)
from .inertia import min_inertia_requirement

__all__ = [
    "safety_margin",
    "SafetyMargins",
    "safety_margins",
    "system_error_moments",
    "GenCostTerms",
    "EsCostTerms",
    "expected_generation_cost_terms",
    "expected_storage_cost_terms",
    "ReformulationOptions",
    "LinearRow",
    "ProgramContext",
    "QuadraticProgram",
    "build_program",
    "fix_commitment",
    "eliminate_columns",
    "with_unit_interval_rows",
]

PROGRAM_KINDS = ("benchmark", "proposed", "network")
MARGIN_MODES = ("paper-verbatim", "symmetric-margins")
VARIANCE_MODES = ("per-system", "aggregated")


def safety_margin(eps: float, sigma: float, mu: float) -> float:
    """Quantile back-off Phi^-1(1 - eps) * sigma - mu for a chance tolerance eps."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"chance tolerance must be in (0, 1), got {eps}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    return float(ndtri(1.0 - eps)) * sigma - mu


@dataclass(frozen=True)
class SafetyMargins:
    """Per-resource quantile margins in their published single-margin form."""

    delta_g: tuple[float, ...]
    delta_d: tuple[float, ...]
    delta_c: tuple[float, ...]
    delta_w: tuple[float, ...]


@dataclass(frozen=True)
class ReformulationOptions:
    margins: str = "paper-verbatim"   # or "symmetric-margins"
    variance: str = "per-system"      # or "aggregated"
    terminal_energy: bool = False     # require e_T >= E_init

    def __post_init__(self) -> None:
        if self.margins not in MARGIN_MODES:
            raise ValueError(f"margins mode must be one of {MARGIN_MODES}, got {self.margins!r}")
        if self.variance not in VARIANCE_MODES:
            raise ValueError(f"variance mode must be one of {VARIANCE_MODES}, got {self.variance!r}")


def system_error_moments(case: SystemCase, options: ReformulationOptions) -> tuple[float, float]:
    """(mean, std) of the system-wide balancing error process.

    ``per-system`` treats the error as a single draw with the per-node
    moments, matching the published cost expansion. ``aggregated`` sums
    independent per-farm errors instead.
    """
    u = case.uncertainty
    if options.variance == "per-system":
        return u.mu_p, u.sigma_p
    n = len(case.wind)
    return n * u.mu_p, math.sqrt(n) * u.sigma_p


def safety_margins(
    case: SystemCase, options: ReformulationOptions = ReformulationOptions()
) -> SafetyMargins:
    mu, sigma = system_error_moments(case, options)
    return SafetyMargins(
        delta_g=tuple(safety_margin(g.eps_g, sigma, mu) for g in case.generators),
        delta_d=tuple(safety_margin(s.eps_d, sigma, mu) for s in case.storage),
        delta_c=tuple(safety_margin(s.eps_c, sigma, mu) for s in case.storage),
        delta_w=tuple(
            safety_margin(w.eps_w, case.uncertainty.sigma_h, case.uncertainty.mu_h)
            for w in case.wind
        ),
    )


# ---------------------------------------------------------------------------
# Expected-cost expansions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenCostTerms:
    """Per-period expected cost of one generator as a quadratic form in (P, alpha, u)."""

    no_load_u: float        # coefficient of u
    lin_P: float            # coefficient of P
    lin_alpha: float        # coefficient of alpha
    quad_PP: float          # coefficient of P^2
    quad_Palpha: float      # coefficient of P * alpha
    quad_alphaalpha: float  # coefficient of alpha^2

    def evaluate(self, P: float, alpha: float, u: float = 1.0) -> float:
        return (
            self.no_load_u * u
            + self.lin_P * P
            + self.lin_alpha * alpha
            + self.quad_PP * P * P
            + self.quad_Palpha * P * alpha
            + self.quad_alphaalpha * alpha * alpha
        )


def expected_generation_cost_terms(
    gen: GeneratorSpec, mu_p: float, sigma_p: float
) -> GenCostTerms:
    """Expectation of c0 + c1*(P + a*W) + c2*(P + a*W)^2 over W ~ N(mu_p, sigma_p^2).

    The no-load cost rides on the commitment variable so that an offline
    generator costs nothing.
    """
    return GenCostTerms(
        no_load_u=gen.c0,
        lin_P=gen.c1,
        lin_alpha=gen.c1 * mu_p,
        quad_PP=gen.c2,
        quad_Palpha=2.0 * gen.c2 * mu_p,
        quad_alphaalpha=gen.c2 * (sigma_p * sigma_p + mu_p * mu_p),
    )


@dataclass(frozen=True)
class EsCostTerms:
    """Per-period expected storage cost, linear in (P_d, P_c, alpha_d, alpha_c)."""

    lin_Pd: float
    lin_alpha_d: float
    lin_Pc: float
    lin_alpha_c: float

    def evaluate(self, P_d: float, P_c: float, alpha_d: float = 0.0, alpha_c: float = 0.0) -> float:
        return (
            self.lin_Pd * P_d
            + self.lin_alpha_d * alpha_d
            + self.lin_Pc * P_c
            + self.lin_alpha_c * alpha_c
        )


def expected_storage_cost_terms(es: StorageSpec, mu_p: float) -> EsCostTerms:
    return EsCostTerms(
        lin_Pd=es.c_d,
        lin_alpha_d=es.c_d * mu_p,
        lin_Pc=es.c_c,
        lin_alpha_c=es.c_c * mu_p,
    )


# ---------------------------------------------------------------------------
# Program representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearRow:
    label: str
    coeffs: tuple[tuple[int, float], ...]   # (column, coefficient) pairs
    rhs: float

    @property
    def tag(self) -> str:
        return self.label.split("[", 1)[0]

    def value(self, x: np.ndarray) -> float:
        return sum(c * x[j] for j, c in self.coeffs)


@dataclass(frozen=True)
class ProgramContext:
    """Case-aware metadata carried by emitted programs for the pricing layer."""

    kind: str
    config: MarketCaseConfig
    options: ReformulationOptions
    h_min: float
    p_sys: float
    delta_t: float
    mu_sys: float
    sigma_sys: float
    gen_margin_up: tuple[float, ...]
    gen_margin_lo: tuple[float, ...]
    es_margin_d: tuple[float, ...]
    es_margin_c: tuple[float, ...]
    es_h_fixed: tuple[Optional[float], ...]   # None where H_e is a decision variable
    wind_in_inertia: bool
    nodes: tuple[str, ...]                    # empty for single-bus programs


@dataclass
class QuadraticProgram:
    """Standard-form convex program with labeled rows.

    minimize   sum_{i<=j} quad[i,j] x_i x_j + lin.x + const
    subject to eq_rows (=), ineq_rows (<=); columns in binary_vars are 0/1.

    Instances are treated as immutable after construction.
    """

    columns: tuple[str, ...]
    quad: dict[tuple[int, int], float]
    lin: np.ndarray
    const: float
    eq_rows: tuple[LinearRow, ...]
    ineq_rows: tuple[LinearRow, ...]
    binary_vars: frozenset[int]
    binary_keys: dict[int, tuple[int, int]] = field(default_factory=dict)
    diagnostics: tuple[str, ...] = ()
    context: Optional[ProgramContext] = None

    @property
    def num_vars(self) -> int:
        return len(self.columns)

    @cached_property
    def var_index(self) -> dict[str, int]:
        return {name: j for j, name in enumerate(self.columns)}

    @cached_property
    def eq_index(self) -> dict[str, int]:
        return {row.label: i for i, row in enumerate(self.eq_rows)}

    @cached_property
    def ineq_index(self) -> dict[str, int]:
        return {row.label: i for i, row in enumerate(self.ineq_rows)}

    def column(self, name: str) -> int:
        return self.var_index[name]

    @cached_property
    def matrices(self):
        """(Q, q, A, b, G, h) with Q dense symmetric and A, G sparse CSR."""
        n = self.num_vars
        Q = np.zeros((n, n))
        for (i, j), v in self.quad.items():
            if i == j:
                Q[i, i] += 2.0 * v
            else:
                Q[i, j] += v
                Q[j, i] += v
        q = np.asarray(self.lin, dtype=float).copy()
        A, b = _rows_to_matrix(self.eq_rows, n)
        G, h = _rows_to_matrix(self.ineq_rows, n)
        return Q, q, A, b, G, h

    def objective_value(self, x: np.ndarray) -> float:
        total = self.const + float(np.dot(self.lin, x))
        for (i, j), v in self.quad.items():
            total += v * x[i] * x[j] if i != j else v * x[i] * x[i]
        return total

    def tag_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for row in self.eq_rows + self.ineq_rows:
            counts[row.tag] = counts.get(row.tag, 0) + 1
        return counts

    def to_text(self) -> str:
        """Plain-text standard-form listing for debugging and oracles."""
        lines = [f"# variables: {self.num_vars}", "minimize"]
        for (i, j), v in sorted(self.quad.items()):
            mono = f"{self.columns[i]}^2" if i == j else f"{self.columns[i]}*{self.columns[j]}"
            lines.append(f"  {v:+.12g} {mono}")
        for j, v in enumerate(self.lin):
            if v != 0.0:
                lines.append(f"  {v:+.12g} {self.columns[j]}")
        if self.const:
            lines.append(f"  {self.const:+.12g}")
        lines.append("subject to")
        for row in self.eq_rows:
            terms = " ".join(f"{c:+.12g} {self.columns[j]}" for j, c in row.coeffs)
            lines.append(f"  {row.label}: {terms} == {row.rhs:.12g}")
        for row in self.ineq_rows:
            terms = " ".join(f"{c:+.12g} {self.columns[j]}" for j, c in row.coeffs)
            lines.append(f"  {row.label}: {terms} <= {row.rhs:.12g}")
        if self.binary_vars:
            names = ", ".join(self.columns[j] for j in sorted(self.binary_vars))
            lines.append(f"binary: {names}")
        return "\n".join(lines) + "\n"


def _rows_to_matrix(rows: Sequence[LinearRow], n: int):
    data, ri, ci = [], [], []
    rhs = np.zeros(len(rows))
    for i, row in enumerate(rows):
        rhs[i] = row.rhs
        for j, c in row.coeffs:
            ri.append(i)
            ci.append(j)
            data.append(c)
    mat = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
    return mat, rhs


class _Builder:
    def __init__(self) -> None:
        self.columns: list[str] = []
        self.quad: dict[tuple[int, int], float] = {}
        self.lin: list[float] = []
        self.const = 0.0
        self.eq_rows: list[LinearRow] = []
        self.ineq_rows: list[LinearRow] = []
        self.binary_vars: set[int] = set()
        self.binary_keys: dict[int, tuple[int, int]] = {}
        self.diagnostics: list[str] = []

    def add_var(self, name: str) -> int:
        self.columns.append(name)
        self.lin.append(0.0)
        return len(self.columns) - 1

    def add_quad(self, i: int, j: int, value: float) -> None:
        if value == 0.0:
            return
        key = (i, j) if i <= j else (j, i)
        self.quad[key] = self.quad.get(key, 0.0) + value

    def add_lin(self, j: int, value: float) -> None:
        self.lin[j] += value

    def add_eq(self, label: str, coeffs: Sequence[tuple[int, float]], rhs: float) -> None:
        self.eq_rows.append(LinearRow(label, tuple(coeffs), rhs))

    def add_ineq(self, label: str, coeffs: Sequence[tuple[int, float]], rhs: float) -> None:
        self.ineq_rows.append(LinearRow(label, tuple(coeffs), rhs))

    def build(self, context: ProgramContext) -> QuadraticProgram:
        return QuadraticProgram(
            columns=tuple(self.columns),
            quad=self.quad,
            lin=np.asarray(self.lin),
            const=self.const,
            eq_rows=tuple(self.eq_rows),
            ineq_rows=tuple(self.ineq_rows),
            binary_vars=frozenset(self.binary_vars),
            binary_keys=dict(self.binary_keys),
            diagnostics=tuple(self.diagnostics),
            context=context,
        )


# ---------------------------------------------------------------------------
# Model builders
# ---------------------------------------------------------------------------

def build_program(
    case: SystemCase,
    config: MarketCaseConfig,
    kind: str = "proposed",
    options: ReformulationOptions = ReformulationOptions(),
) -> QuadraticProgram:
    """Emit the deterministic-equivalent program for the selected model.

    ``benchmark`` is the generators-only market (storage and wind provide
    energy but neither reserve nor inertia), ``proposed`` applies the
    capability gates from ``config``, and ``network`` additionally replaces
    the system balance with nodal balances plus dc flow limits.
    """
    if kind not in PROGRAM_KINDS:
        raise ValueError(f"kind must be one of {PROGRAM_KINDS}, got {kind!r}")
    errors = [d for d in validate_case(case) if d.severity == "error"]
    if errors:
        raise ValueError(f"case fails validation: {errors[0]}")
    if kind == "network" and case.network is None:
        raise ValueError("network program requested but the case has no network section")

    if kind == "benchmark":
        es_reserve = False
        es_h_mode, es_h_const = "off", 0.0
        wind_in = False
    else:
        es_reserve = config.es_reserve
        es_h_mode = config.es_inertia.mode
        es_h_const = config.es_inertia.fixed_h if config.es_inertia.mode == "fixed" else 0.0
        wind_in = config.wind_inertia

    mu, sigma = system_error_moments(case, options)
    quant = {}
    for eps in {g.eps_g for g in case.generators} | {s.eps_d for s in case.storage} | {
        s.eps_c for s in case.storage
    }:
        quant[eps] = float(ndtri(1.0 - eps))

    def margin_upper(eps: float) -> float:
        # Published form uses the same back-off on both bound directions; the
        # exact two-sided reformulation tightens upper rows by +mu instead.
        if options.margins == "symmetric-margins":
            return quant[eps] * sigma + mu
        return quant[eps] * sigma - mu

    def margin_lower(eps: float) -> float:
        return quant[eps] * sigma - mu

    gen_margin_up = tuple(margin_upper(g.eps_g) for g in case.generators)
    gen_margin_lo = tuple(margin_lower(g.eps_g) for g in case.generators)
    es_margin_d = tuple(margin_upper(s.eps_d) for s in case.storage)
    es_margin_c = tuple(margin_upper(s.eps_c) for s in case.storage)

    h_min = min_inertia_requirement(case.inertia, case.P_sys).h_min
    f0 = case.inertia.f0
    rocof = case.inertia.rocof_max
    df = case.inertia.df_max
    dt = case.period_hours
    T = case.horizon

    # Constant wind contribution to the left side of the inertia row, moved to
    # the right side during emission.
    uw = case.uncertainty
    wind_lhs = np.zeros(T)
    if wind_in and case.wind:
        if options.variance == "aggregated" or options.margins == "symmetric-margins":
            if options.variance == "aggregated":
                agg = math.sqrt(sum((uw.sigma_h * w.P_w_max) ** 2 for w in case.wind))
                eps_h = case.wind[0].eps_w
                sys_margin = float(ndtri(1.0 - eps_h)) * agg + uw.mu_h * sum(
                    w.P_w_max for w in case.wind
                )
                for t in range(T):
                    wind_lhs[t] = sum(w.H_w_forecast[t] * w.P_w_max for w in case.wind) - sys_margin
            else:
                for t in range(T):
                    wind_lhs[t] = sum(
                        (w.H_w_forecast[t] - (float(ndtri(1.0 - w.eps_w)) * uw.sigma_h + uw.mu_h))
                        * w.P_w_max
                        for w in case.wind
                    )
        else:
            # Verbatim published sign: the per-farm back-off is added.
            for t in range(T):
                wind_lhs[t] = sum(
                    (w.H_w_forecast[t] + (float(ndtri(1.0 - w.eps_w)) * uw.sigma_h - uw.mu_h))
                    * w.P_w_max
                    for w in case.wind
                )

    b = _Builder()

    # Decision variables, period-major for cache-friendly row assembly.
    P_g = np.empty((len(case.generators), T), dtype=int)
    A_g = np.empty_like(P_g)
    U_g = np.empty_like(P_g)
    P_d = np.empty((len(case.storage), T), dtype=int)
    P_c = np.empty_like(P_d)
    A_d = np.full_like(P_d, -1)
    A_c = np.full_like(P_d, -1)
    H_e = np.full_like(P_d, -1)
    E_lvl = np.empty_like(P_d)
    for t in range(T):
        for i, g in enumerate(case.generators):
            P_g[i, t] = b.add_var(f"P_g[{g.name},{t}]")
            A_g[i, t] = b.add_var(f"alpha_g[{g.name},{t}]")
            col = b.add_var(f"u[{g.name},{t}]")
            U_g[i, t] = col
            b.binary_vars.add(col)
            b.binary_keys[col] = (i, t)
        for j, s in enumerate(case.storage):
            P_d[j, t] = b.add_var(f"P_d[{s.name},{t}]")
            P_c[j, t] = b.add_var(f"P_c[{s.name},{t}]")
            if es_reserve:
                A_d[j, t] = b.add_var(f"alpha_d[{s.name},{t}]")
                A_c[j, t] = b.add_var(f"alpha_c[{s.name},{t}]")
            if es_h_mode == "optimized":
                H_e[j, t] = b.add_var(f"H_e[{s.name},{t}]")
            E_lvl[j, t] = b.add_var(f"e[{s.name},{t}]")

    nodes: tuple[str, ...] = ()
    theta: dict[tuple[str, int], int] = {}
    if kind == "network":
        nodes = case.network.nodes()
        for t in range(T):
            for node in nodes:
                theta[(node, t)] = b.add_var(f"theta[{node},{t}]")

    # Objective.
    for t in range(T):
        for i, g in enumerate(case.generators):
            terms = expected_generation_cost_terms(g, mu, sigma)
            b.add_lin(U_g[i, t], dt * terms.no_load_u)
            b.add_lin(P_g[i, t], dt * terms.lin_P)
            b.add_lin(A_g[i, t], dt * terms.lin_alpha)
            b.add_quad(P_g[i, t], P_g[i, t], dt * terms.quad_PP)
            b.add_quad(P_g[i, t], A_g[i, t], dt * terms.quad_Palpha)
            b.add_quad(A_g[i, t], A_g[i, t], dt * terms.quad_alphaalpha)
        for j, s in enumerate(case.storage):
            terms = expected_storage_cost_terms(s, mu)
            b.add_lin(P_d[j, t], dt * terms.lin_Pd)
            b.add_lin(P_c[j, t], dt * terms.lin_Pc)
            if es_reserve:
                b.add_lin(A_d[j, t], dt * terms.lin_alpha_d)
                b.add_lin(A_c[j, t], dt * terms.lin_alpha_c)

    es_h_fixed: list[Optional[float]] = []
    for j, s in enumerate(case.storage):
        if es_h_mode == "optimized":
            es_h_fixed.append(None)
        elif es_h_mode == "fixed":
            if es_h_const > s.H_e_max:
                b.diagnostics.append(
                    f"fixed storage inertia {es_h_const} s exceeds H_e_max of {s.name}"
                )
            es_h_fixed.append(es_h_const)
        else:
            es_h_fixed.append(0.0)

    # Per-period constraint rows.
    for t in range(T):
        for i, g in enumerate(case.generators):
            nm = g.name
            b.add_ineq(
                f"gen-upper[{nm},{t}]",
                [(P_g[i, t], 1.0), (U_g[i, t], -g.P_max), (A_g[i, t], gen_margin_up[i])],
                0.0,
            )
            b.add_ineq(
                f"gen-lower[{nm},{t}]",
                [(P_g[i, t], -1.0), (U_g[i, t], g.P_min), (A_g[i, t], gen_margin_lo[i])],
                0.0,
            )
            b.add_ineq(f"alpha-g-upper[{nm},{t}]", [(A_g[i, t], 1.0), (U_g[i, t], -1.0)], 0.0)
            b.add_ineq(f"alpha-g-lower[{nm},{t}]", [(A_g[i, t], -1.0)], 0.0)

        for j, s in enumerate(case.storage):
            nm = s.name
            pwr_coef = 2.0 * rocof * s.P_d_max / f0      # inertial power headroom per H_e
            enr_coef = 2.0 * df * s.P_d_max / f0         # inertial energy margin per H_e
            h_pin = es_h_fixed[j]

            coeffs = [(P_d[j, t], 1.0)]
            rhs = s.P_d_max
            if h_pin is None:
                coeffs.append((H_e[j, t], pwr_coef))
            else:
                rhs -= pwr_coef * h_pin
            if es_reserve:
                coeffs.append((A_d[j, t], es_margin_d[j]))
            b.add_ineq(f"es-discharge-upper[{nm},{t}]", coeffs, rhs)
            b.add_ineq(f"es-discharge-lower[{nm},{t}]", [(P_d[j, t], -1.0)], 0.0)

            coeffs = [(P_c[j, t], 1.0)]
            rhs = s.P_c_max
            if h_pin is None:
                coeffs.append((H_e[j, t], pwr_coef))
            else:
                rhs -= pwr_coef * h_pin
            if es_reserve:
                coeffs.append((A_c[j, t], es_margin_c[j]))
            b.add_ineq(f"es-charge-upper[{nm},{t}]", coeffs, rhs)
            b.add_ineq(f"es-charge-lower[{nm},{t}]", [(P_c[j, t], -1.0)], 0.0)

            coeffs = [(E_lvl[j, t], 1.0)]
            rhs = s.E_max
            if h_pin is None:
                coeffs.append((H_e[j, t], enr_coef))
            else:
                rhs -= enr_coef * h_pin
            b.add_ineq(f"es-energy-upper[{nm},{t}]", coeffs, rhs)

            coeffs = [(E_lvl[j, t], -1.0)]
            rhs = -s.E_min
            if h_pin is None:
                coeffs.append((H_e[j, t], enr_coef))
            else:
                rhs -= enr_coef * h_pin
            b.add_ineq(f"es-energy-lower[{nm},{t}]", coeffs, rhs)

            # Energy recursion with the expected balancing flows.
            coeffs = [(E_lvl[j, t], 1.0), (P_d[j, t], dt / s.k), (P_c[j, t], -dt * s.k)]
            if es_reserve:
                coeffs.append((A_d[j, t], dt * mu / s.k))
                coeffs.append((A_c[j, t], -dt * mu * s.k))
            rhs = 0.0
            if t == 0:
                rhs = s.E_init
            else:
                coeffs.append((E_lvl[j, t - 1], -1.0))
            b.add_eq(f"es-energy-balance[{nm},{t}]", coeffs, rhs)

            if es_reserve:
                b.add_ineq(f"alpha-d-upper[{nm},{t}]", [(A_d[j, t], 1.0)], 1.0)
                b.add_ineq(f"alpha-d-lower[{nm},{t}]", [(A_d[j, t], -1.0)], 0.0)
                b.add_ineq(f"alpha-c-upper[{nm},{t}]", [(A_c[j, t], 1.0)], 1.0)
                b.add_ineq(f"alpha-c-lower[{nm},{t}]", [(A_c[j, t], -1.0)], 0.0)
            if h_pin is None:
                b.add_ineq(f"es-inertia-cap[{nm},{t}]", [(H_e[j, t], 1.0)], s.H_e_max)
                b.add_ineq(f"es-inertia-floor[{nm},{t}]", [(H_e[j, t], -1.0)], 0.0)

        # System balance (single-bus kinds) or nodal balances.
        if kind != "network":
            coeffs = [(P_g[i, t], 1.0) for i in range(len(case.generators))]
            for j in range(len(case.storage)):
                coeffs.append((P_d[j, t], 1.0))
                coeffs.append((P_c[j, t], -1.0))
            rhs = case.total_load(t) - case.total_wind_forecast(t)
            b.add_eq(f"power-balance[{t}]", coeffs, rhs)
        else:
            net = case.network
            incident: dict[str, list[tuple[str, float]]] = {n: [] for n in nodes}
            for ln in net.lines:
                incident[ln.node_from].append((ln.node_to, ln.B))
                incident[ln.node_to].append((ln.node_from, ln.B))
            for node in nodes:
                coeffs = []
                for i, g in enumerate(case.generators):
                    if g.node == node:
                        coeffs.append((P_g[i, t], 1.0))
                for j, s in enumerate(case.storage):
                    if s.node == node:
                        coeffs.append((P_d[j, t], 1.0))
                        coeffs.append((P_c[j, t], -1.0))
                bal = 0.0
                for other, susc in incident[node]:
                    coeffs.append((theta[(node, t)], -susc))
                    coeffs.append((theta[(other, t)], susc))
                wind_here = sum(w.forecast[t] for w in case.wind if w.node == node)
                load_here = case.load.get(node, None)
                demand = load_here[t] if load_here is not None else 0.0
                b.add_eq(f"nodal-balance[{node},{t}]", _merge(coeffs), demand - wind_here + bal)
            for ln in net.lines:
                pair = f"{ln.node_from}-{ln.node_to}"
                fwd = [(theta[(ln.node_from, t)], ln.B), (theta[(ln.node_to, t)], -ln.B)]
                b.add_ineq(f"line-upper[{pair},{t}]", fwd, ln.S)
                rev = [(theta[(ln.node_from, t)], -ln.B), (theta[(ln.node_to, t)], ln.B)]
                b.add_ineq(f"line-lower[{pair},{t}]", rev, ln.S)
            b.add_eq(f"ref-angle[{t}]", [(theta[(net.ref_node, t)], 1.0)], 0.0)

        # Reserve adequacy.
        coeffs = [(A_g[i, t], 1.0) for i in range(len(case.generators))]
        if es_reserve:
            for j in range(len(case.storage)):
                coeffs.append((A_d[j, t], 1.0))
                coeffs.append((A_c[j, t], -1.0))
        b.add_eq(f"reserve-adequacy[{t}]", coeffs, 1.0)

        # Inertia adequacy, emitted in MW*s form so the dual is comparable
        # across all model kinds.
        coeffs = [(U_g[i, t], -g.H_g * g.P_max) for i, g in enumerate(case.generators)]
        rhs = -case.P_sys * h_min + wind_lhs[t]
        for j, s in enumerate(case.storage):
            if es_h_fixed[j] is None:
                coeffs.append((H_e[j, t], -s.P_d_max))
            else:
                rhs += es_h_fixed[j] * s.P_d_max
        b.add_ineq(f"inertia-req[{t}]", coeffs, rhs)

    if options.terminal_energy:
        for j, s in enumerate(case.storage):
            b.add_ineq(f"es-terminal[{s.name}]", [(E_lvl[j, T - 1], -1.0)], -s.E_init)

    # Reachability: can the inertia requirement be met at all?
    for t in range(T):
        best = sum(g.H_g * g.P_max for g in case.generators) + wind_lhs[t]
        for j, s in enumerate(case.storage):
            best += (s.H_e_max if es_h_fixed[j] is None else es_h_fixed[j]) * s.P_d_max
        if best < case.P_sys * h_min - 1e-9:
            b.diagnostics.append(
                f"inertia requirement {case.P_sys * h_min:.6g} MW*s unreachable at period {t}: "
                f"max attainable is {best:.6g} MW*s"
            )
            break

    context = ProgramContext(
        kind=kind,
        config=config,
        options=options,
        h_min=h_min,
        p_sys=case.P_sys,
        delta_t=dt,
        mu_sys=mu,
        sigma_sys=sigma,
        gen_margin_up=gen_margin_up,
        gen_margin_lo=gen_margin_lo,
        es_margin_d=es_margin_d,
        es_margin_c=es_margin_c,
        es_h_fixed=tuple(es_h_fixed),
        wind_in_inertia=wind_in,
        nodes=nodes,
    )
    return b.build(context)


def _merge(coeffs: list[tuple[int, float]]) -> list[tuple[int, float]]:
    acc: dict[int, float] = {}
    for j, c in coeffs:
        acc[j] = acc.get(j, 0.0) + c
    return [(j, c) for j, c in acc.items() if c != 0.0]


# ---------------------------------------------------------------------------
# Commitment handling
# ---------------------------------------------------------------------------

def fix_commitment(program: QuadraticProgram, u_star: Sequence[float]) -> QuadraticProgram:
    """Freeze each binary with an equality row; the duals price the commitment.

    Column order of ``u_star`` follows sorted binary column indices. The
    result is a plain convex program (``binary_vars`` empty, objective
    untouched); no redundant box rows are kept, so the commitment dual is
    unique to its equality row.
    """
    cols = sorted(program.binary_vars)
    if len(u_star) != len(cols):
        raise ValueError(f"expected {len(cols)} commitment values, got {len(u_star)}")
    rows = list(program.eq_rows)
    for col, val in zip(cols, u_star):
        v = float(val)
        if v not in (0.0, 1.0):
            raise ValueError(f"commitment values must be 0 or 1, got {val} for {program.columns[col]}")
        inner = program.columns[col].split("[", 1)[1]
        rows.append(LinearRow(f"commitment-fix[{inner}", ((col, 1.0),), v))
    return replace(
        program,
        eq_rows=tuple(rows),
        binary_vars=frozenset(),
        binary_keys={},
    )


def eliminate_columns(program: QuadraticProgram, fixes: Mapping[int, float]) -> QuadraticProgram:
    """Substitute constants for a set of columns, shrinking the program."""
    if not fixes:
        return program
    keep = [j for j in range(program.num_vars) if j not in fixes]
    remap = {old: new for new, old in enumerate(keep)}

    lin = [program.lin[j] for j in keep]
    const = program.const + sum(program.lin[j] * v for j, v in fixes.items())
    quad: dict[tuple[int, int], float] = {}
    for (i, j), v in program.quad.items():
        fi, fj = i in fixes, j in fixes
        if fi and fj:
            const += v * fixes[i] * fixes[j] if i != j else v * fixes[i] ** 2
        elif fi:
            lin[remap[j]] += v * fixes[i]
        elif fj:
            lin[remap[i]] += v * fixes[j]
        else:
            key = (remap[i], remap[j])
            quad[key] = quad.get(key, 0.0) + v

    def convert(rows: Sequence[LinearRow]) -> tuple[LinearRow, ...]:
        out = []
        for row in rows:
            coeffs = []
            rhs = row.rhs
            for j, c in row.coeffs:
                if j in fixes:
                    rhs -= c * fixes[j]
                else:
                    coeffs.append((remap[j], c))
            out.append(LinearRow(row.label, tuple(coeffs), rhs))
        return tuple(out)

    return QuadraticProgram(
        columns=tuple(program.columns[j] for j in keep),
        quad=quad,
        lin=np.asarray(lin),
        const=const,
        eq_rows=convert(program.eq_rows),
        ineq_rows=convert(program.ineq_rows),
        binary_vars=frozenset(remap[j] for j in program.binary_vars if j not in fixes),
        binary_keys={
            remap[j]: key for j, key in program.binary_keys.items() if j not in fixes
        },
        diagnostics=program.diagnostics,
        context=program.context,
    )


def with_unit_interval_rows(program: QuadraticProgram, cols: Sequence[int]) -> QuadraticProgram:
    """Relax the given binaries: append 0 <= x <= 1 rows and clear the flags."""
    rows = list(program.ineq_rows)
    for col in cols:
        name = program.columns[col]
        rows.append(LinearRow(f"relax-upper[{name}]", ((col, 1.0),), 1.0))
        rows.append(LinearRow(f"relax-lower[{name}]", ((col, -1.0),), 0.0))
    return replace(program, ineq_rows=tuple(rows), binary_vars=frozenset(), binary_keys={})
