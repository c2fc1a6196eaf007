"""System data model: case files, validation, the built-in illustrative case
and the six market-case capability configurations.

Case files are single JSON documents (one object per case). Units: powers in
MW, energies in MWh, inertia constants in seconds, costs in $ ($/h for
no-load, $/MWh and $/MWh^2 for marginal terms), frequencies in Hz. All
objects are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from . import inertia as _inertia

__all__ = [
    "CaseError",
    "Diagnostic",
    "GeneratorSpec",
    "StorageSpec",
    "TurbineSpec",
    "WindFarmSpec",
    "UncertaintySpec",
    "NadirParams",
    "InertiaSpec",
    "LineSpec",
    "NetworkSpec",
    "SystemCase",
    "EsInertiaPolicy",
    "MarketCaseConfig",
    "load_case",
    "case_from_dict",
    "case_to_dict",
    "dump_case",
    "validate",
    "builtin_illustrative_case",
    "market_case_config",
]


class CaseError(Exception):
    """Raised by load_case on malformed files or invariant violations."""


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    path: str      # dotted field path, e.g. "storage[0].E_init"
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.path}: {self.message}"


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    node: str
    H_g: float           # inertia constant (s)
    P_max: float         # MW
    P_min: float         # MW
    c0: float            # no-load cost ($/h)
    c1: float            # $/MWh
    c2: float            # $/MWh^2
    eps_g: float         # chance tolerance


@dataclass(frozen=True)
class StorageSpec:
    name: str
    node: str
    H_e_max: float       # max inertia constant (s)
    P_d_max: float       # discharge limit (MW)
    P_c_max: float       # charge limit (MW)
    E_max: float         # MWh
    E_min: float         # MWh
    E_init: float        # MWh
    c_d: float           # $/MWh
    c_c: float           # $/MWh
    k: float             # round-trip efficiency factor, (0, 1]
    eps_d: float
    eps_c: float


@dataclass(frozen=True)
class TurbineSpec:
    m: float             # rotor mass incl. blades (kg)
    r: float             # effective rotor radius (m)
    phi: float           # rotor speed (rad/s)
    P_b_max: float       # turbine rating (MW)
    count: int


@dataclass(frozen=True)
class WindFarmSpec:
    name: str
    node: str
    P_w_max: float                     # rated capacity (MW)
    forecast: tuple[float, ...]        # per-period power forecast (MW)
    H_w_forecast: tuple[float, ...]    # per-period inertia-constant forecast (s)
    eps_w: float
    turbine: Optional[TurbineSpec] = None


@dataclass(frozen=True)
class UncertaintySpec:
    mu_p: float          # mean wind power forecast error (MW)
    sigma_p: float       # its standard deviation (MW)
    mu_h: float          # mean wind inertia forecast error (s)
    sigma_h: float       # its standard deviation (s)


@dataclass(frozen=True)
class NadirParams:
    T: float
    D: float
    R_g: float
    F_g: float
    varsigma: float
    t_nadir: float


@dataclass(frozen=True)
class InertiaSpec:
    f0: float                          # reference frequency (Hz)
    rocof_max: float                   # max admissible RoCoF (Hz/s)
    df_max: float                      # max frequency deviation at nadir (Hz)
    P_im_max_abs: Optional[float] = None   # worst-case imbalance |P_im^max| (MW)
    nadir_params: Optional[NadirParams] = None
    H_min_override: Optional[float] = None


@dataclass(frozen=True)
class LineSpec:
    node_from: str
    node_to: str
    B: float             # susceptance (MW per rad of angle difference)
    S: float             # thermal limit (MW)


@dataclass(frozen=True)
class NetworkSpec:
    lines: tuple[LineSpec, ...]
    ref_node: str

    def nodes(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for ln in self.lines:
            seen.setdefault(ln.node_from)
            seen.setdefault(ln.node_to)
        seen.setdefault(self.ref_node)
        return tuple(seen)


@dataclass(frozen=True)
class SystemCase:
    horizon: int
    period_hours: float
    generators: tuple[GeneratorSpec, ...]
    storage: tuple[StorageSpec, ...]
    wind: tuple[WindFarmSpec, ...]
    load: Mapping[str, tuple[float, ...]]      # node -> per-period demand (MW)
    uncertainty: UncertaintySpec
    inertia: InertiaSpec
    network: Optional[NetworkSpec] = None

    @property
    def P_sys(self) -> float:
        """Total installed generation capacity (MW), the H_eq denominator."""
        return (
            sum(g.P_max for g in self.generators)
            + sum(e.P_d_max for e in self.storage)
            + sum(w.P_w_max for w in self.wind)
        )

    def total_load(self, t: int) -> float:
        return sum(series[t] for series in self.load.values())

    def total_wind_forecast(self, t: int) -> float:
        return sum(w.forecast[t] for w in self.wind)

    def h_min(self) -> float:
        return _inertia.min_inertia_requirement(self.inertia, self.P_sys).h_min


@dataclass(frozen=True)
class EsInertiaPolicy:
    """Whether storage may provide inertia: off, fixed at a constant, or optimized."""

    mode: str                      # "off" | "fixed" | "optimized"
    fixed_h: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode not in ("off", "fixed", "optimized"):
            raise ValueError(f"unknown ES inertia mode {self.mode!r}")
        if self.mode == "fixed" and (self.fixed_h is None or self.fixed_h < 0):
            raise ValueError("fixed ES inertia mode requires a non-negative constant")


@dataclass(frozen=True)
class MarketCaseConfig:
    case_id: int
    es_reserve: bool
    es_inertia: EsInertiaPolicy
    wind_inertia: bool


# Capability matrix for the six studied market cases. Case 3 uses the fixed
# 8 s storage inertia constant.
_MARKET_CASES: dict[int, MarketCaseConfig] = {
    1: MarketCaseConfig(1, False, EsInertiaPolicy("off"), False),
    2: MarketCaseConfig(2, True, EsInertiaPolicy("off"), False),
    3: MarketCaseConfig(3, False, EsInertiaPolicy("fixed", 8.0), False),
    4: MarketCaseConfig(4, False, EsInertiaPolicy("optimized"), False),
    5: MarketCaseConfig(5, True, EsInertiaPolicy("optimized"), False),
    6: MarketCaseConfig(6, True, EsInertiaPolicy("optimized"), True),
}


def market_case_config(case_id: int) -> MarketCaseConfig:
    """Capability switches for market cases 1 through 6."""
    try:
        return _MARKET_CASES[case_id]
    except KeyError:
        raise ValueError(f"market case id must be in 1..6, got {case_id}") from None


# ---------------------------------------------------------------------------
# Parsing / serialization
# ---------------------------------------------------------------------------

def _need(obj: Mapping, key: str, path: str):
    if key not in obj:
        raise CaseError(f"{path}: missing required field {key!r}")
    return obj[key]


def _float(obj: Mapping, key: str, path: str) -> float:
    v = _need(obj, key, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise CaseError(f"{path}.{key}: expected a number, got {v!r}")
    return float(v)


def _opt_float(obj: Mapping, key: str, path: str) -> Optional[float]:
    if key not in obj or obj[key] is None:
        return None
    return _float(obj, key, path)


def _series(obj: Mapping, key: str, path: str, horizon: int) -> tuple[float, ...]:
    v = _need(obj, key, path)
    if not isinstance(v, Sequence) or isinstance(v, str):
        raise CaseError(f"{path}.{key}: expected a list of {horizon} numbers")
    if len(v) != horizon:
        raise CaseError(f"{path}.{key}: expected {horizon} values, got {len(v)}")
    return tuple(float(x) for x in v)


def case_from_dict(doc: Mapping) -> SystemCase:
    """Build a SystemCase from a parsed case document (no validation pass)."""
    if not isinstance(doc, Mapping):
        raise CaseError("case document must be a JSON object")
    horizon = _need(doc, "horizon", "case")
    if not isinstance(horizon, int) or horizon < 1:
        raise CaseError(f"horizon: expected a positive integer, got {horizon!r}")
    period_hours = float(doc.get("period_hours", 1.0))

    generators = []
    for i, g in enumerate(doc.get("generators", [])):
        path = f"generators[{i}]"
        generators.append(
            GeneratorSpec(
                name=str(g.get("name", f"G{i + 1}")),
                node=str(_need(g, "node", path)),
                H_g=_float(g, "H_g", path),
                P_max=_float(g, "P_max", path),
                P_min=_float(g, "P_min", path),
                c0=_float(g, "c0", path),
                c1=_float(g, "c1", path),
                c2=_float(g, "c2", path),
                eps_g=_float(g, "eps_g", path),
            )
        )

    storage = []
    for j, s in enumerate(doc.get("storage", [])):
        path = f"storage[{j}]"
        storage.append(
            StorageSpec(
                name=str(s.get("name", f"ES{j + 1}")),
                node=str(_need(s, "node", path)),
                H_e_max=_float(s, "H_e_max", path),
                P_d_max=_float(s, "P_d_max", path),
                P_c_max=_float(s, "P_c_max", path),
                E_max=_float(s, "E_max", path),
                E_min=_float(s, "E_min", path),
                E_init=_float(s, "E_init", path),
                c_d=_float(s, "c_d", path),
                c_c=_float(s, "c_c", path),
                k=_float(s, "k", path),
                eps_d=_float(s, "eps_d", path),
                eps_c=_float(s, "eps_c", path),
            )
        )

    wind = []
    for w_idx, w in enumerate(doc.get("wind", [])):
        path = f"wind[{w_idx}]"
        turbine = None
        if w.get("turbine") is not None:
            tb = w["turbine"]
            tpath = f"{path}.turbine"
            turbine = TurbineSpec(
                m=_float(tb, "m", tpath),
                r=_float(tb, "r", tpath),
                phi=_float(tb, "phi", tpath),
                P_b_max=_float(tb, "P_b_max", tpath),
                count=int(_need(tb, "count", tpath)),
            )
        wind.append(
            WindFarmSpec(
                name=str(w.get("name", f"W{w_idx + 1}")),
                node=str(_need(w, "node", path)),
                P_w_max=_float(w, "P_w_max", path),
                forecast=_series(w, "forecast", path, horizon),
                H_w_forecast=_series(w, "H_w_forecast", path, horizon),
                eps_w=_float(w, "eps_w", path),
                turbine=turbine,
            )
        )

    load_doc = _need(doc, "load", "case")
    if not isinstance(load_doc, Mapping):
        raise CaseError("load: expected an object mapping node -> series")
    load = {str(node): _series(load_doc, node, "load", horizon) for node in load_doc}

    u = _need(doc, "uncertainty", "case")
    uncertainty = UncertaintySpec(
        mu_p=_float(u, "mu_p", "uncertainty"),
        sigma_p=_float(u, "sigma_p", "uncertainty"),
        mu_h=_float(u, "mu_h", "uncertainty"),
        sigma_h=_float(u, "sigma_h", "uncertainty"),
    )

    ine = _need(doc, "inertia", "case")
    nadir = None
    if ine.get("nadir_params") is not None:
        np_doc = ine["nadir_params"]
        npath = "inertia.nadir_params"
        nadir = NadirParams(
            T=_float(np_doc, "T", npath),
            D=_float(np_doc, "D", npath),
            R_g=_float(np_doc, "R_g", npath),
            F_g=_float(np_doc, "F_g", npath),
            varsigma=_float(np_doc, "varsigma", npath),
            t_nadir=_float(np_doc, "t_nadir", npath),
        )
    inertia_spec = InertiaSpec(
        f0=_float(ine, "f0", "inertia"),
        rocof_max=_float(ine, "rocof_max", "inertia"),
        df_max=_float(ine, "df_max", "inertia"),
        P_im_max_abs=_opt_float(ine, "P_im_max_abs", "inertia"),
        nadir_params=nadir,
        H_min_override=_opt_float(ine, "H_min_override", "inertia"),
    )

    network = None
    if doc.get("network") is not None:
        net = doc["network"]
        lines = []
        for li, ln in enumerate(net.get("lines", [])):
            lpath = f"network.lines[{li}]"
            lines.append(
                LineSpec(
                    node_from=str(_need(ln, "from", lpath)),
                    node_to=str(_need(ln, "to", lpath)),
                    B=_float(ln, "B", lpath),
                    S=_float(ln, "S", lpath),
                )
            )
        network = NetworkSpec(lines=tuple(lines), ref_node=str(_need(net, "ref_node", "network")))

    return SystemCase(
        horizon=horizon,
        period_hours=period_hours,
        generators=tuple(generators),
        storage=tuple(storage),
        wind=tuple(wind),
        load=load,
        uncertainty=uncertainty,
        inertia=inertia_spec,
        network=network,
    )


def case_to_dict(case: SystemCase) -> dict:
    """Serialize a SystemCase back to its case-document form."""
    doc: dict = {
        "horizon": case.horizon,
        "period_hours": case.period_hours,
        "generators": [
            {
                "name": g.name,
                "node": g.node,
                "H_g": g.H_g,
                "P_max": g.P_max,
                "P_min": g.P_min,
                "c0": g.c0,
                "c1": g.c1,
                "c2": g.c2,
                "eps_g": g.eps_g,
            }
            for g in case.generators
        ],
        "storage": [
            {
                "name": s.name,
                "node": s.node,
                "H_e_max": s.H_e_max,
                "P_d_max": s.P_d_max,
                "P_c_max": s.P_c_max,
                "E_max": s.E_max,
                "E_min": s.E_min,
                "E_init": s.E_init,
                "c_d": s.c_d,
                "c_c": s.c_c,
                "k": s.k,
                "eps_d": s.eps_d,
                "eps_c": s.eps_c,
            }
            for s in case.storage
        ],
        "wind": [
            {
                "name": w.name,
                "node": w.node,
                "P_w_max": w.P_w_max,
                "forecast": list(w.forecast),
                "H_w_forecast": list(w.H_w_forecast),
                "eps_w": w.eps_w,
                **(
                    {
                        "turbine": {
                            "m": w.turbine.m,
                            "r": w.turbine.r,
                            "phi": w.turbine.phi,
                            "P_b_max": w.turbine.P_b_max,
                            "count": w.turbine.count,
                        }
                    }
                    if w.turbine is not None
                    else {}
                ),
            }
            for w in case.wind
        ],
        "load": {node: list(series) for node, series in case.load.items()},
        "uncertainty": {
            "mu_p": case.uncertainty.mu_p,
            "sigma_p": case.uncertainty.sigma_p,
            "mu_h": case.uncertainty.mu_h,
            "sigma_h": case.uncertainty.sigma_h,
        },
        "inertia": {
            "f0": case.inertia.f0,
            "rocof_max": case.inertia.rocof_max,
            "df_max": case.inertia.df_max,
        },
    }
    if case.inertia.P_im_max_abs is not None:
        doc["inertia"]["P_im_max_abs"] = case.inertia.P_im_max_abs
    if case.inertia.nadir_params is not None:
        p = case.inertia.nadir_params
        doc["inertia"]["nadir_params"] = {
            "T": p.T, "D": p.D, "R_g": p.R_g, "F_g": p.F_g,
            "varsigma": p.varsigma, "t_nadir": p.t_nadir,
        }
    if case.inertia.H_min_override is not None:
        doc["inertia"]["H_min_override"] = case.inertia.H_min_override
    if case.network is not None:
        doc["network"] = {
            "lines": [
                {"from": ln.node_from, "to": ln.node_to, "B": ln.B, "S": ln.S}
                for ln in case.network.lines
            ],
            "ref_node": case.network.ref_node,
        }
    return doc


def dump_case(case: SystemCase) -> str:
    return json.dumps(case_to_dict(case), indent=2) + "\n"


def load_case(path: Union[str, Path]) -> SystemCase:
    """Load and validate a case file; raises CaseError on any error finding."""
    p = Path(path)
    if not p.exists():
        raise CaseError(f"case file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"malformed case file {p}: {exc}") from exc
    case = case_from_dict(doc)
    errors = [d for d in validate(case) if d.severity == "error"]
    if errors:
        raise CaseError("; ".join(str(d) for d in errors))
    return case


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate(case: SystemCase) -> list[Diagnostic]:
    """Check all type invariants plus system-level coverability.

    Returns an empty list iff the case is clean. Never raises.
    """
    out: list[Diagnostic] = []

    def err(path: str, msg: str) -> None:
        out.append(Diagnostic("error", path, msg))

    def warn(path: str, msg: str) -> None:
        out.append(Diagnostic("warning", path, msg))

    if case.horizon < 1:
        err("horizon", f"must be >= 1, got {case.horizon}")
    if case.period_hours <= 0:
        err("period_hours", f"must be positive, got {case.period_hours}")

    for i, g in enumerate(case.generators):
        path = f"generators[{i}]"
        if not g.P_max >= g.P_min >= 0:
            err(path, f"requires P_max >= P_min >= 0, got {g.P_max}/{g.P_min} ({g.name})")
        if g.H_g < 0:
            err(f"{path}.H_g", f"must be >= 0, got {g.H_g}")
        if g.c2 < 0:
            err(f"{path}.c2", f"must be >= 0 for convexity, got {g.c2}")
        if not 0 < g.eps_g < 0.5:
            err(f"{path}.eps_g", f"must be in (0, 0.5), got {g.eps_g}")

    for j, s in enumerate(case.storage):
        path = f"storage[{j}]"
        if not s.E_min <= s.E_init <= s.E_max:
            err(
                f"{path}.E_init",
                f"requires E_min <= E_init <= E_max, got {s.E_min}/{s.E_init}/{s.E_max} ({s.name})",
            )
        if s.P_d_max < 0 or s.P_c_max < 0:
            err(path, f"power limits must be >= 0, got {s.P_d_max}/{s.P_c_max}")
        if not 0 < s.k <= 1:
            err(f"{path}.k", f"efficiency must be in (0, 1], got {s.k}")
        if s.H_e_max < 0:
            err(f"{path}.H_e_max", f"must be >= 0, got {s.H_e_max}")
        for eps_name, eps in (("eps_d", s.eps_d), ("eps_c", s.eps_c)):
            if not 0 < eps < 0.5:
                err(f"{path}.{eps_name}", f"must be in (0, 0.5), got {eps}")

    for w_idx, w in enumerate(case.wind):
        path = f"wind[{w_idx}]"
        for t, v in enumerate(w.forecast):
            if not 0 <= v <= w.P_w_max:
                err(f"{path}.forecast[{t}]", f"must be within [0, {w.P_w_max}], got {v}")
        for t, v in enumerate(w.H_w_forecast):
            if v < 0:
                err(f"{path}.H_w_forecast[{t}]", f"must be >= 0, got {v}")
        if not 0 < w.eps_w < 0.5:
            err(f"{path}.eps_w", f"must be in (0, 0.5), got {w.eps_w}")
        if w.turbine is not None:
            try:
                h = _inertia.wind_turbine_inertia_constant_mw(
                    w.turbine.m, w.turbine.r, w.turbine.phi, w.turbine.P_b_max
                )
            except ValueError as exc:
                err(f"{path}.turbine", str(exc))
            else:
                for t, v in enumerate(w.H_w_forecast):
                    if abs(v - h) > 1e-9:
                        err(
                            f"{path}.H_w_forecast[{t}]",
                            f"inconsistent with turbine data: expected {h!r}, got {v!r}",
                        )
                        break

    u = case.uncertainty
    if u.sigma_p < 0:
        err("uncertainty.sigma_p", f"must be >= 0, got {u.sigma_p}")
    if u.sigma_h < 0:
        err("uncertainty.sigma_h", f"must be >= 0, got {u.sigma_h}")

    ine = case.inertia
    if ine.f0 <= 0:
        err("inertia.f0", f"must be positive, got {ine.f0}")
    if ine.rocof_max <= 0:
        err("inertia.rocof_max", f"must be positive, got {ine.rocof_max}")
    if ine.df_max <= 0:
        err("inertia.df_max", f"must be positive, got {ine.df_max}")
    if ine.H_min_override is None and ine.P_im_max_abs is None:
        err("inertia", "needs P_im_max_abs when H_min_override is absent")

    for node, series in case.load.items():
        if len(series) != case.horizon:
            err(f"load.{node}", f"expected {case.horizon} values, got {len(series)}")
        for t, v in enumerate(series):
            if v < 0:
                err(f"load.{node}[{t}]", f"demand must be >= 0, got {v}")

    if case.network is not None:
        net = case.network
        for li, ln in enumerate(net.lines):
            if ln.B <= 0:
                err(f"network.lines[{li}].B", f"must be positive, got {ln.B}")
            if ln.S <= 0:
                err(f"network.lines[{li}].S", f"must be positive, got {ln.S}")
        net_nodes = set(net.nodes())
        used_nodes = (
            {g.node for g in case.generators}
            | {s.node for s in case.storage}
            | {w.node for w in case.wind}
            | set(case.load)
        )
        missing = sorted(used_nodes - net_nodes)
        if missing:
            err("network", f"nodes {missing} carry load or resources but are not on any line")
        elif net_nodes and not _connected(net, net_nodes):
            err("network", "network graph is not connected")
        for kind, specs in (("generators", case.generators), ("storage", case.storage), ("wind", case.wind)):
            nodes = [s.node for s in specs]
            dupes = sorted({n for n in nodes if nodes.count(n) > 1})
            if dupes:
                err(kind, f"networked cases allow at most one unit per node, duplicates at {dupes}")

    # Coverability: committed capacity plus storage and forecast wind must be
    # able to meet demand in every period.
    if case.horizon >= 1 and not any(d.severity == "error" for d in out):
        cap_g = sum(g.P_max for g in case.generators)
        cap_es = sum(s.P_d_max for s in case.storage)
        for t in range(case.horizon):
            available = cap_g + cap_es + case.total_wind_forecast(t)
            if available < case.total_load(t):
                warn(
                    f"load[{t}]",
                    f"peak demand {case.total_load(t)} exceeds total capacity {available}; "
                    "no feasible commitment can cover it",
                )
                break

    return out


def _connected(net: NetworkSpec, nodes: set[str]) -> bool:
    adj: dict[str, set[str]] = {n: set() for n in nodes}
    for ln in net.lines:
        adj[ln.node_from].add(ln.node_to)
        adj[ln.node_to].add(ln.node_from)
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return seen == nodes


# ---------------------------------------------------------------------------
# Built-in illustrative case
# ---------------------------------------------------------------------------

def builtin_illustrative_case() -> SystemCase:
    """The 4-generator / 2-storage / 1-wind-farm example system.

    Generator, storage and auxiliary parameters follow the published tables;
    the 24 h load and wind profiles are synthesized with the documented
    28.14 MW peak load and an early-morning high-wind trough. The profiles
    live in the packaged case file so they can be replaced with digitized
    data without code changes.
    """
    ref = resources.files("inertia_market").joinpath("data/illustrative.json")
    doc = json.loads(ref.read_text())
    case = case_from_dict(doc)
    errors = [d for d in validate(case) if d.severity == "error"]
    if errors:  # pragma: no cover - packaged data is checked in tests
        raise CaseError("; ".join(str(d) for d in errors))
    return case
