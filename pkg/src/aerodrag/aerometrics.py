"""Aerodynamic coefficients and regression metrics.

All metrics are evaluated in float64 whatever the model precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DRAG_COUNT = 1e-4


class InvalidFlow(ValueError):
    pass


class MetricError(ValueError):
    pass


class ZeroVariance(MetricError):
    pass


class NearZeroActual(MetricError):
    pass


@dataclass(frozen=True)
class FlowConditions:
    rho: float = 1.225  # kg/m^3
    u_inf: float = 30.0  # m/s
    a_ref: float = 1.0  # m^2
    p_inf: float = 0.0  # Pa

    def __post_init__(self):
        if not (self.rho > 0 and self.u_inf > 0 and self.a_ref > 0):
            raise InvalidFlow(f"rho, u_inf and a_ref must be positive: {self}")

    @property
    def dynamic_pressure(self) -> float:
        return 0.5 * self.rho * self.u_inf**2


@dataclass(frozen=True)
class AeroCoefficients:
    cd: float
    cl: float = float("nan")
    cl_f: float = float("nan")
    cl_r: float = float("nan")
    cm: float = float("nan")


def drag_coefficient(f_d: float, flow: FlowConditions) -> float:
    return f_d / (flow.dynamic_pressure * flow.a_ref)


def pressure_coefficient(p, flow: FlowConditions):
    return (np.asarray(p, dtype=np.float64) - flow.p_inf) / flow.dynamic_pressure


def to_drag_counts(delta_cd: float) -> float:
    return delta_cd / DRAG_COUNT


def from_drag_counts(counts: float) -> float:
    return counts * DRAG_COUNT


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if a.shape != p.shape:
        raise MetricError(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise MetricError("metrics need at least one sample")
    return a, p


def mse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean((a - p) ** 2))


def r_squared(actual, predicted) -> float:
    """1 - SS_res / SS_tot, with SS_tot taken about the mean of ``actual``."""
    a, p = _pair(actual, predicted)
    if a.size < 2:
        raise MetricError("r_squared needs at least two samples")
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("actual values are constant")
    ss_res = float(np.sum((a - p) ** 2))
    return 1.0 - ss_res / ss_tot


def mean_relative_error(actual, predicted) -> float:
    """Mean of |pred - actual| / |actual|, in percent."""
    a, p = _pair(actual, predicted)
    if np.any(np.abs(a) < 1e-12):
        raise NearZeroActual("relative error undefined for actual values near zero")
    return float(100.0 * np.mean(np.abs(p - a) / np.abs(a)))


def regression_report(actual, predicted) -> dict:
    a, p = _pair(actual, predicted)
    report = {"mse": mse(a, p), "mean_rel_err_pct": mean_relative_error(a, p)}
    try:
        report["r2"] = r_squared(a, p)
    except MetricError:
        report["r2"] = float("nan")
    return report
