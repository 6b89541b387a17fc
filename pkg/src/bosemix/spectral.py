"""Nearest-neighbour level-spacing statistics.

Unfolding maps raw energies through a smooth fit of the cumulative level
count so that the mean spacing becomes one. The unfolded spacings are then
compared with the Poisson, Wigner-Dyson and Brody distributions, the last
one interpolating between the first two through the parameter ``beta``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial
from scipy import optimize, stats
from scipy.special import gamma

BETA_BOX = (0.0, 1.2)
MIN_LEVELS = 200
MEAN_SPACING_TOL = 0.02
PICKET_FENCE_VARIANCE = 0.01
# largest Kolmogorov-Smirnov distance to the fitted Brody law still accepted as a fit
KS_MAX = 0.1
# unfolded spacings below this are treated as unresolved (censored) in the likelihood
ZERO_SPACING = 1e-6


class SpectrumTooShortError(ValueError):
    pass


class UnfoldingError(ValueError):
    pass


class FitError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class UnfoldedSpectrum:
    levels: np.ndarray
    discard_low: float
    discard_high: float
    poly_degree: int
    n_removed_low: int
    n_removed_high: int

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.levels)

    @property
    def mean_spacing(self) -> float:
        return float((self.levels[-1] - self.levels[0]) / (self.levels.size - 1))


def unfold(energies, discard_low: float = 0.05, poly_degree: int = 10,
           discard_high: float = 0.0) -> UnfoldedSpectrum:
    """Unfold a sorted spectrum with a polynomial fit to its level staircase.

    ``floor(discard_low * D)`` lowest and ``floor(discard_high * D)`` highest
    levels are dropped before fitting. Exactly degenerate energies map to
    identical unfolded values, so zero spacings survive.
    """
    e = np.asarray(energies, dtype=float)
    if e.ndim != 1 or np.any(np.diff(e) < 0):
        raise ValueError("energies must be a sorted 1D array")
    if not 3 <= poly_degree <= 20:
        raise ValueError("poly_degree must lie in [3, 20]")
    if not (0 <= discard_low < 1 and 0 <= discard_high < 1):
        raise ValueError("discard fractions must lie in [0, 1)")
    lo = math.floor(discard_low * e.size)
    hi = math.floor(discard_high * e.size)
    e = e[lo:e.size - hi]
    if e.size < MIN_LEVELS:
        raise SpectrumTooShortError(f"{e.size} levels after discards, need {MIN_LEVELS}")
    # the fit runs on the window mapped to [-1, 1], so E -> aE + c leaves it unchanged
    staircase = np.arange(e.size, dtype=float)
    p = Polynomial.fit(e, staircase, poly_degree)
    u = p(e)
    steps = np.diff(u)
    if np.any(steps < -1e-6):
        raise UnfoldingError(f"unfolded levels are not monotone (min step {steps.min():.3g}); "
                             "lower the polynomial degree")
    out = UnfoldedSpectrum(u, discard_low, discard_high, poly_degree, lo, hi)
    if abs(out.mean_spacing - 1) > MEAN_SPACING_TOL:
        raise UnfoldingError(f"mean unfolded spacing {out.mean_spacing:.4f} is not 1 within 2%")
    return out


@dataclass(frozen=True, eq=False)
class SpacingDistribution:
    spacings: np.ndarray
    edges: np.ndarray
    density: np.ndarray  # counts / (n_samples * bin width)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "density"])
            for a, b, d in zip(self.edges[:-1], self.edges[1:], self.density):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(d))])

    def spacings_to_csv(self, path) -> None:
        np.savetxt(Path(path), self.spacings, header="s", comments="", fmt="%.17g")


def spacing_distribution(unfolded, bins: int = 40, s_max: float = 4.0) -> SpacingDistribution:
    """Spacings and their density histogram on ``[0, s_max]``.

    Accepts an ``UnfoldedSpectrum`` or a plain array of spacings. The
    density is normalized by the total sample count, so spacings above
    ``s_max`` lower the histogram mass below one.
    """
    s = unfolded.spacings if isinstance(unfolded, UnfoldedSpectrum) else np.asarray(unfolded, float)
    edges = np.linspace(0.0, s_max, bins + 1)
    counts, _ = np.histogram(s, edges)
    return SpacingDistribution(s, edges, counts / (s.size * np.diff(edges)))


def brody_b(beta: float) -> float:
    """Normalization ``b = Gamma((beta+2)/(beta+1))**(beta+1)`` giving unit mean spacing."""
    return float(gamma((beta + 2) / (beta + 1)) ** (beta + 1))


def _check_beta(beta):
    if beta is None or not BETA_BOX[0] <= beta <= BETA_BOX[1]:
        raise ValueError(f"beta must lie in {list(BETA_BOX)}, got {beta!r}")


def reference_pdf(kind: str, s, beta: float | None = None) -> np.ndarray:
    """Spacing density of kind ``poisson``, ``wigner_dyson`` or ``brody``."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("spacings must be non-negative")
    if kind == "poisson":
        return np.exp(-s)
    if kind == "wigner_dyson":
        return 0.5 * np.pi * s * np.exp(-0.25 * np.pi * s * s)
    if kind == "brody":
        _check_beta(beta)
        b = brody_b(beta)
        return (beta + 1) * b * s ** beta * np.exp(-b * s ** (beta + 1))
    raise ValueError(f"unknown distribution {kind!r}")


def brody_cdf(s, beta: float) -> np.ndarray:
    _check_beta(beta)
    return -np.expm1(-brody_b(beta) * np.asarray(s, float) ** (beta + 1))


def sample_brody(beta: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF samples from the Brody distribution."""
    _check_beta(beta)
    u = rng.random(size)
    return (-np.log1p(-u) / brody_b(beta)) ** (1.0 / (beta + 1))


@dataclass(frozen=True)
class BrodyFit:
    beta: float | None
    b: float | None
    fittable: bool
    method: str
    n_samples: int
    objective: float | None  # log-likelihood (mle) or residual sum of squares (histogram)
    variance: float
    ks_distance: float | None = None
    reason: str = ""
    settings: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def _loglik(beta, s, n_low, n_high, s_max):
    b = brody_b(beta)
    a = beta + 1
    ll = np.sum(np.log(a * b) + beta * np.log(s) - b * s ** a)
    if n_low:
        ll += n_low * math.log(max(-math.expm1(-b * ZERO_SPACING ** a), 1e-300))
    # right-censored tail: log(1 - F(s_max))
    ll -= n_high * b * s_max ** a
    return float(ll)


def brody_fit(spacings, method: str = "mle", bins: int = 40, s_max: float = 4.0,
              variance_threshold: float = PICKET_FENCE_VARIANCE, ks_max: float = KS_MAX) -> BrodyFit:
    """Fit the Brody parameter to unfolded spacings.

    Two outcomes are reported as ``fittable=False`` rather than as a fit:
    a regular ladder, whose spacing variance is below ``variance_threshold``,
    and a clustered ladder (tight bunches on an evenly spaced shell lattice),
    whose spacings no Brody law describes. The latter is detected by the
    Kolmogorov-Smirnov distance between the spacings and the best fit
    exceeding ``ks_max``.

    The likelihood uses the same range ``[0, s_max]`` as the histogram:
    spacings above ``s_max`` enter as right-censored observations, so a few
    gaps between oscillator shells cannot dominate the estimate, and
    spacings below ``ZERO_SPACING`` (exact degeneracies) as left-censored
    ones.
    """
    s = np.asarray(spacings.spacings if isinstance(spacings, UnfoldedSpectrum) else spacings, float)
    if s.size < MIN_LEVELS:
        raise SpectrumTooShortError(f"{s.size} spacings, need {MIN_LEVELS}")
    if np.any(s < 0):
        raise ValueError("spacings must be non-negative")
    var = float(np.var(s))
    settings = {"bins": bins, "s_max": s_max, "variance_threshold": variance_threshold,
                "ks_max": ks_max, "zero_spacing": ZERO_SPACING}
    if var < variance_threshold:
        return BrodyFit(None, None, False, method, int(s.size), None, var, None, "spacing variance below threshold",
                        settings)
    if method == "mle":
        low, high = s < ZERO_SPACING, s > s_max
        resolved = s[~(low | high)]
        n_low, n_high = int(low.sum()), int(high.sum())
        settings.update(n_censored_low=n_low, n_censored_high=n_high)
        res = optimize.minimize_scalar(lambda x: -_loglik(x, resolved, n_low, n_high, s_max), bounds=BETA_BOX,
                                       method="bounded", options={"xatol": 1e-7})
        objective = -float(res.fun)
    elif method == "histogram":
        edges = np.linspace(0.0, s_max, bins + 1)
        counts, _ = np.histogram(s, edges)
        target = counts / s.size

        def rss(beta):
            return float(np.sum((np.diff(brody_cdf(edges, beta)) - target) ** 2))

        res = optimize.minimize_scalar(rss, bounds=BETA_BOX, method="bounded", options={"xatol": 1e-7})
        objective = float(res.fun)
    else:
        raise ValueError("method must be 'mle' or 'histogram'")
    if not res.success or not np.isfinite(res.fun):
        raise FitError(f"Brody fit failed: {res.message}")
    beta = float(res.x)
    ks = float(stats.kstest(s, lambda x: brody_cdf(np.maximum(x, 0.0), beta)).statistic)
    if ks > ks_max:
        return BrodyFit(beta, brody_b(beta), False, method, int(s.size), objective, var, ks,
                        "no Brody law matches the spacings", settings)
    return BrodyFit(beta, brody_b(beta), True, method, int(s.size), objective, var, ks, "", settings)


@dataclass(frozen=True, eq=False)
class SpacingAnalysis:
    unfolded: UnfoldedSpectrum
    fit: BrodyFit
    requested_degree: int


def analyze_levels(energies, discard_low: float = 0.05, poly_degree: int = 10, discard_high: float = 0.0,
                   method: str = "mle", **fit_kwargs) -> SpacingAnalysis:
    """Unfold and fit, lowering the polynomial degree until the unfolding is monotone.

    The degree actually used is stored on ``result.unfolded.poly_degree``.
    """
    err = None
    for deg in range(poly_degree, 2, -1):
        try:
            u = unfold(energies, discard_low, deg, discard_high)
        except UnfoldingError as exc:
            err = exc
            continue
        return SpacingAnalysis(u, brody_fit(u.spacings, method, **fit_kwargs), poly_degree)
    raise err
