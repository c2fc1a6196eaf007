"""Inertia physics: turbine inertia constants, system equivalent inertia and
the minimum inertia requirement.

Turbine formulas work in SI units (kg, m, rad/s, W). The case schema stores
powers in MW; conversion happens at the boundary (see
:func:`wind_turbine_inertia_constant_mw`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:  # pragma: no cover
    from .cases import InertiaSpec, SystemCase

__all__ = [
    "HminBreakdown",
    "turbine_moment_of_inertia",
    "turbine_inertia_constant",
    "wind_turbine_inertia_constant_mw",
    "equivalent_inertia",
    "min_inertia_requirement",
]

MW_TO_W = 1e6


def turbine_moment_of_inertia(m: float, r: float) -> float:
    """Moment of inertia of a three-bladed rotor: m * r^2 / 9 (kg m^2).

    ``m`` is the mass of the whole rotor including blades (kg) and ``r`` the
    effective rotor radius (m).
    """
    if m <= 0 or r <= 0:
        raise ValueError(f"rotor mass and radius must be positive, got m={m}, r={r}")
    return m * r * r / 9.0


def turbine_inertia_constant(J: float, phi: float, P_b_max: float) -> float:
    """Inertia constant of one turbine: J * phi^2 / (2 * P_b_max), in seconds.

    ``J`` in kg m^2, ``phi`` rotor speed in rad/s, ``P_b_max`` rated power in
    watts. A farm of identical turbines has the same inertia constant as a
    single turbine (the kinetic energy and the rating both scale with the
    turbine count).
    """
    if J <= 0 or phi <= 0 or P_b_max <= 0:
        raise ValueError(
            f"J, phi and P_b_max must be positive, got J={J}, phi={phi}, P_b_max={P_b_max}"
        )
    return J * phi * phi / (2.0 * P_b_max)


def wind_turbine_inertia_constant_mw(m: float, r: float, phi: float, P_b_max_mw: float) -> float:
    """Farm inertia constant (s) from turbine data with the rating in MW."""
    J = turbine_moment_of_inertia(m, r)
    return turbine_inertia_constant(J, phi, P_b_max_mw * MW_TO_W)


@dataclass(frozen=True)
class HminBreakdown:
    """Minimum equivalent inertia requirement, split by limiting phenomenon.

    ``h_min`` is the governing value: the override when one is configured,
    otherwise the max of the RoCoF term and (when computable) the nadir term.
    """

    rocof_term: float
    nadir_term: Optional[float]
    h_min: float
    note: Optional[str] = None


def min_inertia_requirement(inertia: "InertiaSpec", P_sys: float) -> HminBreakdown:
    """Minimum equivalent system inertia (s) for a worst-case imbalance.

    RoCoF branch: |P_im_max| * f0 / (2 * rocof_max * P_sys).  The nadir
    branch is evaluated only when ``nadir_params`` is present; when its base
    is non-positive the term is omitted with a note (RoCoF is the binding
    limit in practice).  A configured ``H_min_override`` wins outright.
    """
    if P_sys <= 0:
        raise ValueError(f"P_sys must be positive, got {P_sys}")
    if inertia.rocof_max <= 0:
        raise ValueError(f"rocof_max must be positive, got {inertia.rocof_max}")

    note = None
    if inertia.P_im_max_abs is not None:
        rocof_term = abs(inertia.P_im_max_abs) * inertia.f0 / (2.0 * inertia.rocof_max * P_sys)
    else:
        rocof_term = 0.0
        note = "no worst-case imbalance given; RoCoF term set to 0"

    nadir_term: Optional[float] = None
    p = inertia.nadir_params
    if p is not None and inertia.P_im_max_abs not in (None, 0.0):
        p_im = abs(inertia.P_im_max_abs)
        decay = math.exp(-p.varsigma * inertia.f0 * p.t_nadir)
        base = (inertia.df_max * (p.D + p.R_g) - p_im) / (p_im * decay)
        if base <= 0:
            note = "nadir branch infeasible (non-positive base); term omitted"
        else:
            nadir_term = p.T * (p.R_g - p.F_g) / (base * base)
            if nadir_term < 0:
                note = "nadir branch produced a negative term; omitted"
                nadir_term = None

    if inertia.H_min_override is not None:
        h_min = inertia.H_min_override
    elif nadir_term is not None:
        h_min = max(rocof_term, nadir_term)
    else:
        h_min = rocof_term
    return HminBreakdown(rocof_term=rocof_term, nadir_term=nadir_term, h_min=h_min, note=note)


def equivalent_inertia(
    case: "SystemCase",
    commitment: Sequence[Sequence[float]],
    H_e: Sequence[Sequence[float]],
    t: int,
) -> float:
    """Expected equivalent system inertia (s) at period ``t``.

    ``commitment`` is indexed [generator][period], ``H_e`` [storage][period].
    The wind contribution enters in expectation, i.e. the forecast inertia
    constant minus the mean forecast error mu_h.
    """
    if len(commitment) != len(case.generators):
        raise ValueError(
            f"commitment has {len(commitment)} rows for {len(case.generators)} generators"
        )
    if len(H_e) != len(case.storage):
        raise ValueError(f"H_e has {len(H_e)} rows for {len(case.storage)} storage units")
    if not 0 <= t < case.horizon:
        raise ValueError(f"period {t} outside horizon {case.horizon}")

    total = 0.0
    for i, gen in enumerate(case.generators):
        total += float(commitment[i][t]) * gen.H_g * gen.P_max
    for j, es in enumerate(case.storage):
        total += float(H_e[j][t]) * es.P_d_max
    for w in case.wind:
        total += (w.H_w_forecast[t] - case.uncertainty.mu_h) * w.P_w_max
    return total / case.P_sys
