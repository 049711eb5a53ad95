"""Weighted least-squares fits and the g2-vs-storage prediction.

Each fit runs a Nelder-Mead search on chi-square in parameter units scaled
by the starting point, restarts it from its own optimum, and polishes the
result with a Levenberg-Marquardt step. A fit counts as converged when one
more Gauss-Newton step would lower chi-square by less than ``GRAD_TOL``.
Uncertainties come from the inverse of ``J^T J`` of the weighted residuals,
taking the supplied sigmas as absolute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize
from sklearn.base import BaseEstimator, RegressorMixin

from .correlation import CoincidenceHistogram
from .memory import spectral_hole_scan, spin_dephasing_efficiency
from .source import LN2

RTOL = 1e-10
GRAD_TOL = 1e-6  # chi-square units; one sigma is a change of 1


class FitError(RuntimeError):
    """Raised by estimators when the underlying fit does not converge."""


@dataclass
class FitResult:
    model: str
    parameters: dict
    uncertainties: dict
    covariance: np.ndarray
    residual_norm: float  # sqrt of chi-square
    n_points: int
    converged: bool
    message: str = ""
    decrement: float = math.nan

    def __getitem__(self, name: str) -> float:
        return self.parameters[name]

    @property
    def chi2(self) -> float:
        return self.residual_norm**2

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "parameters": self.parameters,
            "uncertainties": self.uncertainties,
            "covariance": np.asarray(self.covariance).tolist(),
            "residual_norm": self.residual_norm,
            "n_points": self.n_points,
            "converged": self.converged,
            "decrement": self.decrement if math.isfinite(self.decrement) else None,
            "message": self.message,
        }


def weighted_fit(model, x, y, sigma, p0, names, model_name: str, restarts: int = 2) -> FitResult:
    """Minimise ``sum(((y - model(x, *p)) / sigma)^2)`` starting from ``p0``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("all sigmas must be positive")
    scale = np.where(p0 != 0, np.abs(p0), 1.0)

    def resid(u):
        r = (y - model(x, *(u * scale))) / sigma
        return np.where(np.isfinite(r), r, 1e150)

    def chi2(u):
        return float(np.sum(resid(u) ** 2))

    u = np.ones_like(p0)
    for _ in range(1 + restarts):
        res = minimize(chi2, u, method="Nelder-Mead",
                       options={"xatol": RTOL, "fatol": RTOL, "maxiter": 4000 * len(p0)})
        u = res.x
    try:
        ls = least_squares(resid, u, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                           max_nfev=2000 * len(p0))
        u = ls.x
        jac = ls.jac
        ok = ls.status > 0
        msg = ls.message
    except ValueError as exc:  # fewer residuals than parameters
        jac = None
        ok = False
        msg = str(exc)

    r = resid(u)
    p = u * scale
    npar = len(p)
    cov = np.full((npar, npar), np.nan)
    dec = math.nan
    if jac is not None:
        jtj = jac.T @ jac
        if np.linalg.matrix_rank(jtj) < npar:
            ok = False
            msg = "singular Jacobian at optimum"
        else:
            cov = np.linalg.inv(jtj) * np.outer(scale, scale)
            # Gauss-Newton decrement: chi-square a further step would still remove
            g = jac.T @ r
            dec = float(abs(g @ np.linalg.solve(jtj, g)))
    chisq = float(r @ r)
    converged = bool(ok and np.all(np.isfinite(p)) and np.all(np.isfinite(cov))
                     and dec <= GRAD_TOL)
    if ok and not converged:
        msg = f"Gauss-Newton decrement {dec:.3g} above tolerance"
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    return FitResult(model_name, dict(zip(names, map(float, p))), dict(zip(names, map(float, err))),
                     cov, math.sqrt(chisq), len(y), converged, msg, dec)


# spin decay

def gaussian_decay(t_s, eta_0, gamma_inh):
    return eta_0 * np.exp(-((np.asarray(t_s) * gamma_inh) ** 2) * math.pi**2 / (2 * LN2))


def fit_gaussian_decay(points) -> FitResult:
    """Fit ``eta_0 * spin_dephasing_efficiency(t_s, gamma_inh)`` to ``(t_s, eta, sigma)`` rows."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise ValueError("at least 3 points are required")
    t, eta, sig = pts.T
    good = eta > 0
    if good.sum() >= 2 and np.ptp(t[good] ** 2) > 0:
        slope, icpt = np.polyfit(t[good] ** 2, np.log(eta[good]), 1)
        gamma0 = math.sqrt(max(-slope, 1e-30) * 2 * LN2) / math.pi
        eta0 = math.exp(icpt)
    else:
        gamma0, eta0 = 1.0 / max(t.max(), 1e-9), max(eta.max(), 1e-9)
    fit = weighted_fit(gaussian_decay, t, eta, sig, [eta0, gamma0], ["eta_0", "gamma_inh"],
                       "gaussian_decay")
    fit.parameters["gamma_inh"] = abs(fit.parameters["gamma_inh"])
    return fit


# coincidence peak

def _bin_mean_exp(left, right, t0, a):
    """Mean of ``exp(-a|t - t0|)`` over each bin ``[left, right)``."""

    def prim(x):
        return np.sign(x) * (-np.expm1(-a * np.abs(x))) / a

    return (prim(right - t0) - prim(left - t0)) / (right - left)


def double_exponential_counts(edges, tau_c, amplitude, floor, t0):
    """Expected bin counts of ``floor + amplitude * exp(-2 ln2 |t - t0| / tau_c)``, averaged per bin."""
    edges = np.asarray(edges, dtype=float)
    a = 2 * LN2 / abs(tau_c)
    return floor + amplitude * _bin_mean_exp(edges[:-1], edges[1:], t0, a)


def fit_double_exponential(hist: CoincidenceHistogram, peak_delay: float | None = None) -> FitResult:
    """Fit a double-exponential peak on a flat floor to a coincidence histogram.

    Counts are weighted by their Poisson sigma (1 for empty bins). ``tau_c``
    is the FWHM of the peak in seconds, ``amplitude`` and ``floor`` are in
    counts per bin and ``t0`` is the peak centre.
    """
    counts = hist.counts.astype(float)
    edges, centers = hist.edges, hist.centers
    sigma = np.sqrt(np.maximum(counts, 1.0))
    names = ["tau_c", "amplitude", "floor", "t0"]
    floor0 = float(np.median(counts))
    k = int(np.argmax(counts)) if peak_delay is None else int(np.argmin(np.abs(centers - peak_delay)))
    amp0 = counts[k] - floor0
    if len(counts) < 5 or amp0 <= 3.0 * math.sqrt(floor0 + 1.0):
        nan = {n: math.nan for n in names}
        return FitResult("double_exponential", nan, dict(nan), np.full((4, 4), np.nan), math.nan,
                         len(counts), False, "no resolvable peak above the floor")
    above = np.flatnonzero(counts - floor0 >= 0.5 * amp0)
    tau0 = max((above.max() - above.min() + 1) * hist.bin_width, hist.bin_width)

    model = lambda e_unused, tau, amp, fl, t0: double_exponential_counts(edges, tau, amp, fl, t0)
    fit = weighted_fit(model, centers, counts, sigma, [tau0, amp0, max(floor0, 1.0), centers[k]],
                       names, "double_exponential")
    fit.parameters["tau_c"] = abs(fit.parameters["tau_c"])
    if fit.converged and fit.parameters["amplitude"] <= 2 * fit.uncertainties["amplitude"]:
        fit.converged = False
        fit.message = "fitted peak amplitude not significant"
    return fit


# hole-burning scan

def hole_scan_model(detuning, photon_fwhm, amplitude, hole_width):
    return amplitude * spectral_hole_scan(abs(photon_fwhm), hole_width, detuning)


def raw_fwhm(x, y) -> float:
    """FWHM of sampled data by linear interpolation at half maximum."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    k = int(np.argmax(y))
    half = 0.5 * y[k]
    lo = np.flatnonzero(y[:k] < half)
    hi = np.flatnonzero(y[k:] < half)
    if len(lo) == 0 or len(hi) == 0:
        return math.nan
    i, j = lo[-1], k + hi[0]
    xl = np.interp(half, [y[i], y[i + 1]], [x[i], x[i + 1]])
    xr = np.interp(half, [y[j], y[j - 1]], [x[j], x[j - 1]])
    return float(xr - xl)


def fit_hole_scan(rates, hole_width: float) -> FitResult:
    """Recover the photon Lorentzian FWHM from ``(detuning, rate, sigma)`` rows of a hole scan."""
    pts = np.asarray(rates, dtype=float).reshape(-1, 3)
    if len(pts) < 5:
        raise ValueError("at least 5 scan points are required")
    d, r, s = pts.T
    raw = raw_fwhm(d, r)
    fwhm0 = raw - hole_width if math.isfinite(raw) and raw > 1.5 * hole_width else max(raw / 2, hole_width)
    if not math.isfinite(fwhm0) or fwhm0 <= 0:
        fwhm0 = np.ptp(d) / 4
    model = lambda x, fw, amp: hole_scan_model(x, fw, amp, hole_width)
    fit = weighted_fit(model, d, r, s, [fwhm0, r.max()], ["photon_fwhm", "amplitude"], "hole_scan")
    fit.parameters["photon_fwhm"] = abs(fit.parameters["photon_fwhm"])
    return fit


# storage-time prediction

@dataclass
class G2Prediction:
    t_s: np.ndarray
    g2: np.ndarray
    unbounded: bool = False


def predict_g2_vs_storage(fit: FitResult, eta_h: float, noise_floor: float, t_s_values) -> G2Prediction:
    """``1 + eta_h * eta_sw(t_s) / noise_floor`` from a converged spin-decay fit."""
    if not fit.converged:
        raise ValueError("prediction requires a converged fit")
    if not 0 <= eta_h <= 1 or noise_floor < 0:
        raise ValueError("eta_h must lie in [0, 1] and noise_floor be non-negative")
    t = np.asarray(t_s_values, dtype=float)
    eta = np.maximum(gaussian_decay(t, fit["eta_0"], fit["gamma_inh"]), 0.0)
    if noise_floor == 0:
        return G2Prediction(t, np.full(t.shape, math.inf), True)
    if math.isinf(noise_floor):
        return G2Prediction(t, np.ones(t.shape))
    return G2Prediction(t, 1.0 + eta_h * eta / noise_floor)


def storage_time_at_threshold(fit: FitResult, eta_h: float, noise_floor: float,
                              threshold: float) -> float:
    """Spin storage time at which the predicted g2 falls to ``threshold``; ``nan`` if never above."""
    excess = (threshold - 1.0) * noise_floor / (eta_h * fit["eta_0"])
    if excess >= 1:
        return math.nan
    if excess <= 0:
        return math.inf
    return math.sqrt(-math.log(excess) * 2 * LN2) / (math.pi * fit["gamma_inh"])


# scikit-learn style wrappers

def _column(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError("expected a single feature column")
        X = X[:, 0]
    return X


class _FitMixin:
    def _store(self, fit: FitResult):
        if not fit.converged:
            raise FitError(f"{fit.model} fit did not converge: {fit.message}")
        self.result_ = fit
        for k, v in fit.parameters.items():
            setattr(self, k + "_", v)
        return self


class GaussianDecayRegressor(_FitMixin, RegressorMixin, BaseEstimator):
    """Spin-wave efficiency versus storage time ``X`` (s)."""

    def fit(self, X, y, sigma=None):
        t, y = _column(X), np.asarray(y, dtype=float)
        sigma = np.full(len(y), 0.05 * np.max(y)) if sigma is None else np.asarray(sigma, float)
        return self._store(fit_gaussian_decay(np.column_stack([t, y, sigma])))

    def predict(self, X):
        return gaussian_decay(_column(X), self.eta_0_, self.gamma_inh_)


class DoubleExponentialPeak(_FitMixin, RegressorMixin, BaseEstimator):
    """Coincidence counts versus delay; ``X`` holds bin centres on a uniform grid."""

    def __init__(self, bin_width: float | None = None):
        self.bin_width = bin_width

    def fit(self, X, y):
        c = _column(X)
        bw = self.bin_width or float(np.median(np.diff(c)))
        hist = CoincidenceHistogram(bw, (c[0] - bw / 2, c[-1] + bw / 2),
                                    np.rint(y).astype(np.int64), 0)
        self.bin_width_ = bw
        return self._store(fit_double_exponential(hist))

    def predict(self, X):
        c = _column(X)
        half = self.bin_width_ / 2
        a = 2 * LN2 / self.tau_c_
        return self.floor_ + self.amplitude_ * _bin_mean_exp(c - half, c + half, self.t0_, a)


class HoleScanRegressor(_FitMixin, RegressorMixin, BaseEstimator):
    """Transmitted rate versus laser detuning ``X`` (Hz) for a fixed hole width."""

    def __init__(self, hole_width: float = 0.8e6):
        self.hole_width = hole_width

    def fit(self, X, y, sigma=None):
        d, y = _column(X), np.asarray(y, dtype=float)
        sigma = np.full(len(y), 0.05 * np.max(y)) if sigma is None else np.asarray(sigma, float)
        return self._store(fit_hole_scan(np.column_stack([d, y, sigma]), self.hole_width))

    def predict(self, X):
        return hole_scan_model(_column(X), self.photon_fwhm_, self.amplitude_, self.hole_width)
