"""Curve fitting and vacuum inference for trap observables.

The decay fitters use damped Gauss-Newton (Levenberg-style step control)
on analytic Jacobians, with time constants parameterized as log(tau) for
positivity.  TOF thermometry is a linear problem in (t^2, sigma^2) and is
solved exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .constants import K_B, M_RB87
from .errors import FitError

#: He mass (kg) and Rb-He cross-section (m^2) for pressure inference
M_HE = 6.646e-27
SIGMA_RB_HE = 1e-18  # 100 square Angstrom

# upper bound for time constants; large enough that exp(-t/tau) is 1.0
# to machine precision over any laboratory time window
_TAU_CAP = 1e15


@dataclass(frozen=True)
class FitResult:
    model: str
    parameters: dict[str, float]
    uncertainties: dict[str, float]
    rss: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "parameters": {k: float(v) for k, v in self.parameters.items()},
            "uncertainties": {k: float(v) for k, v in self.uncertainties.items()},
            "rss": float(self.rss),
            "covariance": np.asarray(self.covariance).tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _gauss_newton(residual_jac, theta0, max_iter=500, rtol=1e-10):
    """Damped Gauss-Newton: residual_jac(theta) -> (r, J) with r = model - y."""
    theta = np.asarray(theta0, dtype=float)
    r, J = residual_jac(theta)
    sse = float(r @ r)
    lam = 1e-3
    it = 0
    for it in range(1, max_iter + 1):
        A = J.T @ J
        g = J.T @ r
        ok = False
        for _ in range(50):
            try:
                step = np.linalg.solve(A + lam * np.diag(np.maximum(np.diag(A), 1e-300)),
                                       -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = theta + step
            r_new, J_new = residual_jac(cand)
            sse_new = float(r_new @ r_new)
            if np.isfinite(sse_new) and sse_new <= sse:
                ok = True
                break
            lam *= 10
        if not ok:
            break
        improved = sse - sse_new
        step_small = np.linalg.norm(step) <= 1e-12 * (1.0 + np.linalg.norm(theta))
        theta, r, J, sse = cand, r_new, J_new, sse_new
        lam = max(lam * 0.3, 1e-12)
        if improved <= rtol * max(sse, 1e-300) or step_small:
            return theta, r, J, sse, it, True
    return theta, r, J, sse, it, False


def _covariance(r, J, n_params):
    n = len(r)
    dof = max(n - n_params, 1)
    s2 = float(r @ r) / dof
    try:
        cov = s2 * np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((n_params, n_params), np.nan)
    return cov


def _loglinear_fit(t, y):
    """ln y = a - t/tau by least squares; returns (amplitude, tau)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = y > 0
    if mask.sum() < 2:
        return float(np.max(y, initial=1.0)), _TAU_CAP
    k, a = np.polyfit(t[mask], np.log(y[mask]), 1)
    tau = -1.0 / k if k < 0 else _TAU_CAP
    return float(np.exp(a)), float(min(tau, _TAU_CAP))


def fit_biexponential(t, N, weights=None) -> FitResult:
    """Fit N(t) = A1 exp(-t/tau1) + A2 exp(-t/tau2) with tau1 < tau2.

    Initialization: log-linear fit of the last third gives the slow
    component; the early-time remainder gives the fast one.
    """
    t = np.asarray(t, dtype=float)
    N = np.asarray(N, dtype=float)
    if len(t) < 6:
        raise FitError("bi-exponential fit needs at least 6 points")
    if np.any(np.diff(t) <= 0):
        raise FitError("times must be strictly increasing")
    if np.any(N <= 0):
        raise FitError("atom numbers must be positive")
    w = np.ones_like(N) if weights is None else np.sqrt(np.asarray(weights, float))

    i_tail = max(len(t) * 2 // 3, len(t) - max(len(t) // 3, 2))
    A2, tau2 = _loglinear_fit(t[i_tail:], N[i_tail:])
    head = slice(0, max(len(t) // 3, 3))
    remainder = N[head] - A2 * np.exp(-t[head] / tau2)
    A1, tau1 = _loglinear_fit(t[head], np.clip(remainder, 1e-12 * N.max(), None))
    if not (0 < tau1 < tau2):
        tau1 = max(tau2 / 20.0, (t[1] - t[0]) or 1.0)
    A1 = max(A1, 1e-6 * N.max())

    log_cap = np.log(_TAU_CAP)

    def residual_jac(theta):
        a1, a2, l1, l2 = theta
        # box the time constants: below the cap the clip is inactive and
        # the Jacobian stays exact
        theta[2] = l1 = min(max(l1, -30.0), log_cap)
        theta[3] = l2 = min(max(l2, -30.0), log_cap)
        tau_1, tau_2 = np.exp(l1), np.exp(l2)
        e1 = np.exp(-t / tau_1)
        e2 = np.exp(-t / tau_2)
        model = a1 * e1 + a2 * e2
        r = w * (model - N)
        J = np.column_stack([
            w * e1,
            w * e2,
            w * a1 * e1 * t / tau_1,   # d/d log tau1
            w * a2 * e2 * t / tau_2,
        ])
        return r, J

    theta0 = np.array([A1, A2, np.log(tau1), np.log(min(tau2, _TAU_CAP))])
    theta, r, J, sse, it, conv = _gauss_newton(residual_jac, theta0)
    if not conv:
        best = _biexp_result(theta, r, J, sse, it, conv, t)
        raise FitError("bi-exponential fit did not converge", best=best)
    return _biexp_result(theta, r, J, sse, it, conv, t)


def _biexp_result(theta, r, J, sse, it, conv, t):
    a1, a2, l1, l2 = theta
    tau1, tau2 = float(np.exp(l1)), float(np.exp(l2))
    if tau1 > tau2:  # enforce the ordering by swapping components
        a1, a2, tau1, tau2 = a2, a1, tau2, tau1
        J = J[:, [1, 0, 3, 2]]
    cov = _covariance(r, J, 4)
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    warnings = []
    if tau2 / tau1 < 1.5:
        warnings.append("time constants nearly degenerate (tau2/tau1 < 1.5)")
    if tau2 >= 1e6:
        warnings.append("slow component consistent with no decay (tau2 >= 1e6 s)")
    return FitResult(
        model="biexponential",
        parameters={"A1": float(a1), "A2": float(a2), "tau1": tau1, "tau2": tau2},
        uncertainties={"A1": float(sd[0]), "A2": float(sd[1]),
                       "tau1": tau1 * float(sd[2]), "tau2": tau2 * float(sd[3])},
        rss=float(sse), covariance=cov, converged=conv, iterations=it,
        warnings=tuple(warnings),
    )


def fit_tof(times, widths, mass: float = M_RB87) -> FitResult:
    """TOF thermometry: sigma^2(t) = sigma0^2 + (kB T / m) t^2, linear LSQ."""
    times = np.asarray(times, dtype=float)
    widths = np.asarray(widths, dtype=float)
    if len(times) < 3:
        raise FitError("TOF fit needs at least 3 points")
    if np.any(times < 0):
        raise FitError("flight times must be >= 0")
    x = times**2
    y = widths**2
    A = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = coef
    warnings = []
    T = slope * mass / K_B
    if T < 0:
        warnings.append("negative slope; temperature clamped to 0")
        T = 0.0
    sigma0 = np.sqrt(max(intercept, 0.0))
    if intercept < 0:
        warnings.append("negative intercept; sigma0 clamped to 0")
    r = A @ coef - y
    cov = _covariance(r, A, 2)
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(
        model="tof",
        parameters={"sigma0": float(sigma0), "T": float(T)},
        uncertainties={"sigma0": float(sd[1] / (2 * sigma0)) if sigma0 > 0 else 0.0,
                       "T": float(sd[0] * mass / K_B)},
        rss=float(r @ r), covariance=cov, converged=True, iterations=1,
        warnings=tuple(warnings),
    )


def fit_exponential_decay(t, y) -> FitResult:
    """Fit y(t) = y_inf + a exp(-t/tau)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(t) < 4:
        raise FitError("exponential-decay fit needs at least 4 points")
    y_inf0 = float(y[-1])
    a0 = float(y[0] - y_inf0)
    if abs(a0) < 1e-12 * max(abs(y_inf0), 1.0):
        a0 = 1e-12 * max(abs(y_inf0), 1.0)
    resid = (y - y_inf0) / a0
    _, tau0 = _loglinear_fit(t, np.clip(resid, 1e-9, None))
    tau0 = min(max(tau0, (t[-1] - t[0]) / 50), _TAU_CAP)

    log_cap = np.log(_TAU_CAP)

    def residual_jac(theta):
        y_inf, a, l = theta
        theta[2] = l = min(max(l, -30.0), log_cap)
        tau = np.exp(l)
        e = np.exp(-t / tau)
        r = y_inf + a * e - y
        J = np.column_stack([np.ones_like(t), e, a * e * t / tau])
        return r, J

    theta, r, J, sse, it, conv = _gauss_newton(
        residual_jac, np.array([y_inf0, a0, np.log(tau0)]))
    if not conv:
        raise FitError("exponential-decay fit did not converge",
                       best=_expdecay_result(theta, r, J, sse, it, conv))
    return _expdecay_result(theta, r, J, sse, it, conv)


def _expdecay_result(theta, r, J, sse, it, conv):
    y_inf, a, l = theta
    tau = float(np.exp(l))
    cov = _covariance(r, J, 3)
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return FitResult(
        model="exponential_decay",
        parameters={"y_inf": float(y_inf), "amplitude": float(a), "tau": tau},
        uncertainties={"y_inf": float(sd[0]), "amplitude": float(sd[1]),
                       "tau": tau * float(sd[2])},
        rss=float(sse), covariance=cov, converged=conv, iterations=it,
    )


@dataclass(frozen=True)
class PressureQuery:
    """Inputs for the background-collision pressure/lifetime relation."""

    tau: float                       # trap lifetime, s
    cross_section: float = SIGMA_RB_HE
    gas_temperature: float = 4.2     # K
    gas_mass: float = M_HE           # kg

    def __post_init__(self):
        for name in ("tau", "cross_section", "gas_temperature", "gas_mass"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def mean_gas_speed(gas_temperature: float, gas_mass: float) -> float:
    return float(np.sqrt(8 * K_B * gas_temperature / (np.pi * gas_mass)))


def infer_pressure(q: PressureQuery) -> dict[str, float]:
    """Background pressure from the trap lifetime: P = kB T / (tau sigma vbar)."""
    vbar = mean_gas_speed(q.gas_temperature, q.gas_mass)
    p_pa = K_B * q.gas_temperature / (q.tau * q.cross_section * vbar)
    return {"pressure_Pa": p_pa, "pressure_mbar": p_pa / 100.0,
            "mean_gas_speed_m_s": vbar}


def infer_lifetime(pressure_pa: float, cross_section: float = SIGMA_RB_HE,
                   gas_temperature: float = 4.2, gas_mass: float = M_HE) -> float:
    """Exact inverse of infer_pressure, seconds."""
    if pressure_pa <= 0:
        raise ValueError("pressure must be positive")
    vbar = mean_gas_speed(gas_temperature, gas_mass)
    return K_B * gas_temperature / (pressure_pa * cross_section * vbar)
