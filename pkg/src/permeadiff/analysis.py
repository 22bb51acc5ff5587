"""Time-dependent ADC/ADK estimation and the structural-disorder regression.

Propagator route: direction-projected displacement moments. Signal route:
weighted cumulant fit of ln S against b and b^2 at low b. Both are
direction-averaged; the substrates are isotropic by construction.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyEnsemble,
    InsufficientBValues,
    InsufficientSamples,
    NonPositiveSignal,
)

DEFAULT_B_CUT = 2.5  # ms/um^2, highest b used in the signal cumulant fit


@dataclass(frozen=True)
class CumulantEstimate:
    t: float  # diffusion time, ms
    adc: float  # um^2/ms
    adk: float
    source: str  # "propagator" | "signal"
    compartment: str  # "all" | "intra" | "extra"
    adc_se: float = 0.0
    adk_se: float = 0.0


def _projections(displacements, directions):
    d = np.asarray(displacements, dtype=np.float64)
    u = np.asarray(directions, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] == 0:
        raise EmptyEnsemble("no displacements")
    return d @ u.T  # (N, K)


def adc_from_propagator(displacements, t, directions):
    """Direction-averaged apparent diffusion coefficient <(u.d)^2> / (2t)."""
    if t <= 0:
        raise ValueError("t must be > 0")
    proj = _projections(displacements, directions)
    return float(np.mean(proj**2) / (2.0 * t))


def adk_from_propagator(displacements, t, directions):
    """Direction-averaged apparent kurtosis <(u.d)^4> / <(u.d)^2>^2 - 3."""
    if t <= 0:
        raise ValueError("t must be > 0")
    proj = _projections(displacements, directions)
    m2 = np.mean(proj**2, axis=0)
    m4 = np.mean(proj**4, axis=0)
    return float(np.mean(m4 / m2**2 - 3.0))


def propagator_cumulants(displacements, t, directions, n_boot=0, seed=0):
    """(adc, adk, adc_se, adk_se); standard errors from a walker bootstrap."""
    adc = adc_from_propagator(displacements, t, directions)
    adk = adk_from_propagator(displacements, t, directions)
    if n_boot <= 0:
        return adc, adk, 0.0, 0.0
    rng = np.random.default_rng(seed)
    n = len(displacements)
    adcs = np.empty(n_boot)
    adks = np.empty(n_boot)
    for i in range(n_boot):
        idx = rng.integers(0, n, n)
        adcs[i] = adc_from_propagator(displacements[idx], t, directions)
        adks[i] = adk_from_propagator(displacements[idx], t, directions)
    return adc, adk, float(adcs.std(ddof=1)), float(adks.std(ddof=1))


def adc_adk_from_signal(b, s, b_cut=DEFAULT_B_CUT, weights=None):
    """Cumulant fit ln S = -b D + (1/6) K D^2 b^2 over b <= b_cut.

    Needs at least 3 distinct b including 0; returns (adc, adk).
    """
    b = np.asarray(b, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    keep = b <= b_cut + 1e-12
    b, s = b[keep], s[keep]
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)[keep]
    if len(np.unique(b)) < 3 or not np.any(b == 0.0):
        raise InsufficientBValues("need >= 3 distinct b including b = 0")
    if np.any(s <= 0):
        raise NonPositiveSignal("log of non-positive signal")
    y = np.log(s)
    x = np.column_stack([-b, b**2])
    if weights is not None:
        w = np.sqrt(weights)
        coef, *_ = np.linalg.lstsq(x * w[:, None], y * w, rcond=None)
    else:
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    d = float(coef[0])
    k = float(6.0 * coef[1] / d**2) if d != 0.0 else 0.0
    return d, k


def powerlaw_fit(t, k, t_min):
    """OLS of K against ln(t)/t for t >= t_min; returns (slope, intercept, r2)."""
    t = np.asarray(t, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    keep = t >= t_min - 1e-12
    t, k = t[keep], k[keep]
    if len(t) < 3:
        raise InsufficientSamples("need >= 3 samples beyond t_min")
    x = np.log(t) / t
    a = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(a, k, rcond=None)
    resid = k - a @ coef
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((k - k.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def propagator_time_series(record, directions, compartments=("all", "intra", "extra"),
                           n_boot=0, seed=0):
    """CumulantEstimates at every checkpoint for the requested initial-tag
    compartments."""
    out = []
    for comp in compartments:
        mask = record.compartment_mask(comp)
        if not np.any(mask):
            continue
        for ci, t in enumerate(record.times_ms):
            if t <= 0:
                continue
            adc, adk, se_a, se_k = propagator_cumulants(
                record.displacements[ci][mask], t, directions, n_boot, seed
            )
            out.append(
                CumulantEstimate(float(t), adc, adk, "propagator", comp, se_a, se_k)
            )
    return out


def signal_time_series(signal_set, b_cut=DEFAULT_B_CUT,
                       compartments=("all", "intra", "extra")):
    """Signal-route ADC/ADK per diffusion time from powder averages."""
    out = []
    for comp in compartments:
        rows = signal_set.powder(comp)
        by_delta = {}
        for (ds, db, b), v in rows:
            by_delta.setdefault(db, []).append((b, v))
        for db, pairs in sorted(by_delta.items()):
            b = np.array([p[0] for p in pairs])
            s = np.array([p[1] for p in pairs])
            if np.any(~np.isfinite(s)):
                continue
            try:
                adc, adk = adc_adk_from_signal(b, s, b_cut)
            except (InsufficientBValues, NonPositiveSignal):
                continue
            out.append(CumulantEstimate(float(db), adc, adk, "signal", comp))
    return out


def save_cumulants_csv(estimates, path):
    with open(path, "w") as fh:
        fh.write("t_ms,compartment,source,adc,adk,adc_se,adk_se\n")
        for e in sorted(estimates, key=lambda e: (e.source, e.compartment, e.t)):
            fh.write(
                f"{e.t:.12g},{e.compartment},{e.source},"
                f"{e.adc:.12g},{e.adk:.12g},{e.adc_se:.12g},{e.adk_se:.12g}\n"
            )


def save_nmse_csv(nmse_rows, path):
    with open(path, "w") as fh:
        fh.write("delta_ms,Delta_ms,b,nmse\n")
        for (ds, db, b), v in nmse_rows:
            fh.write(f"{ds:.12g},{db:.12g},{b:.12g},{v:.12g}\n")
