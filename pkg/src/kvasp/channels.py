"""Hierarchical survey denoisers for the likelihood and prior factor nodes.

A denoiser ("mean/var" step) takes a message consisting of a mean and a
ladder of K+1 cumulative variances, forms the tilted hierarchical posterior
of the corresponding factor, and returns the posterior mean together with
the matched output ladder. Closed forms are provided for Gaussian factors
(every K, both regimes), for the two-atom prior at K = 1 in both regimes,
and for the single-level K = 0 cases; the nested quadrature route in
:mod:`kvasp.quadrature` covers the rest and doubles as the cross-check
oracle.

Regimes: ``MMSE`` is the unit-temperature posterior (discrete priors keep
their atom weights); ``MAP`` is the zero-temperature limit where the
innermost integral becomes a maximization.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp

from .errors import NumericError, ParameterError

_LOG2PI = math.log(2.0 * math.pi)


class Regime(enum.Enum):
    MMSE = "mmse"   # beta = 1
    MAP = "map"     # beta -> infinity


@dataclass(frozen=True)
class RsbLadder:
    """Replica-structure descriptor: breaking sizes L_1 < ... < L_K.

    K = 0 (empty ``L``) is the degenerate single-level case. Consecutive
    ratios must be positive integers; in the MMSE regime the L_k themselves
    must be positive integers.
    """

    L: tuple = ()
    regime: Regime = Regime.MAP

    def __post_init__(self):
        L = tuple(float(v) for v in self.L)
        object.__setattr__(self, "L", L)
        prev = None
        for lk in L:
            if lk <= 0:
                raise ParameterError(f"breaking sizes must be positive: {L}")
            if prev is not None:
                if lk <= prev:
                    raise ParameterError(f"breaking sizes must increase: {L}")
                ratio = lk / prev
                if abs(ratio - round(ratio)) > 1e-9:
                    raise ParameterError(
                        f"consecutive ratios must be integers: {L}")
            prev = lk
        if self.regime == Regime.MMSE:
            for lk in L:
                if abs(lk - round(lk)) > 1e-9:
                    raise ParameterError(
                        f"MMSE regime needs integer breaking sizes: {L}")

    @property
    def K(self) -> int:
        return len(self.L)


@dataclass(frozen=True)
class PosteriorMoments:
    """Denoiser output: mean, cumulative variance ladder, log partition.

    ``c_hat`` has shape (K+1,) for scalar input or (K+1, n) when vectorized;
    ``log_partition`` is the per-replica log normalizer g (diagnostic, may
    be None for routes that do not compute it).
    """

    mean: np.ndarray
    c_hat: np.ndarray
    log_partition: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Channel specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AwgnLikelihood:
    """q(y | z) = N(y | z, v). v = 0 is allowed only for data generation."""

    v: float
    role = "likelihood"

    def __post_init__(self):
        if self.v < 0:
            raise ParameterError(f"noise variance must be >= 0, got {self.v}")

    def sample_noise(self, rng, size):
        return rng.standard_normal(size) * math.sqrt(self.v)


@dataclass(frozen=True)
class BpskPrior:
    """Two equiprobable atoms at +-a."""

    a: float = 1.0
    role = "prior"

    def __post_init__(self):
        if self.a <= 0:
            raise ParameterError(f"amplitude must be positive, got {self.a}")

    def second_moment(self) -> float:
        return self.a ** 2

    def variance(self) -> float:
        return self.a ** 2

    def sample(self, rng, size):
        return self.a * np.where(rng.random(size) < 0.5, 1.0, -1.0)


@dataclass(frozen=True)
class RelaxedBpskPrior:
    """p(x) propto exp(-(|x| - 1)^2 / (2c)).

    Exactly an equal mixture of N(+1, c) restricted to x > 0 and N(-1, c)
    restricted to x < 0.
    """

    c: float
    role = "prior"

    def __post_init__(self):
        if self.c <= 0:
            raise ParameterError(f"relaxation variance must be positive, got {self.c}")

    def second_moment(self) -> float:
        # E[x^2] of N(1, c) truncated to (0, inf); both halves contribute equally.
        z = 1.0 / math.sqrt(self.c)
        lam = math.exp(_log_phi(z) - log_ndtr(z))
        return 1.0 + self.c + math.sqrt(self.c) * lam

    def variance(self) -> float:
        # symmetric, zero mean
        return self.second_moment()

    def sample(self, rng, size):
        from scipy.special import ndtr, ndtri
        sign = np.where(rng.random(size) < 0.5, 1.0, -1.0)
        # inverse-CDF draw from N(1, c) truncated to (0, inf), then mirrored
        lo = ndtr(-1.0 / math.sqrt(self.c))
        u = lo + rng.random(size) * (1.0 - lo)
        return sign * (1.0 + math.sqrt(self.c) * ndtri(u))


@dataclass(frozen=True)
class GaussianPrior:
    mean: float
    var: float
    role = "prior"

    def __post_init__(self):
        if self.var <= 0:
            raise ParameterError(f"variance must be positive, got {self.var}")

    def second_moment(self) -> float:
        return self.mean ** 2 + self.var

    def variance(self) -> float:
        return self.var

    def sample(self, rng, size):
        return self.mean + math.sqrt(self.var) * rng.standard_normal(size)


@dataclass(frozen=True)
class ModelChannels:
    """True generative pair and the (possibly mismatched) postulated pair."""

    true_prior: object
    true_likelihood: AwgnLikelihood
    post_prior: object
    post_likelihood: AwgnLikelihood

    @property
    def matched(self) -> bool:
        return (self.true_prior == self.post_prior
                and self.true_likelihood == self.post_likelihood)


# ---------------------------------------------------------------------------
# Ladder maps
# ---------------------------------------------------------------------------

def ladder_to_levels(c: np.ndarray, ladder: RsbLadder) -> np.ndarray:
    """Cumulative ladder -> level variances: v_0 = c_0, v_k = (c_k - c_{k-1}) / L_k."""
    c = np.asarray(c, dtype=float)
    if c.shape[0] != ladder.K + 1:
        raise ParameterError(
            f"ladder has {c.shape[0]} entries, expected K+1={ladder.K + 1}")
    v = np.empty_like(c)
    v[0] = c[0]
    for k, lk in enumerate(ladder.L, start=1):
        v[k] = (c[k] - c[k - 1]) / lk
    return v


def levels_to_ladder(v: np.ndarray, ladder: RsbLadder) -> np.ndarray:
    """Inverse of :func:`ladder_to_levels`: c_0 = v_0, c_k = c_{k-1} + L_k v_k."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != ladder.K + 1:
        raise ParameterError(
            f"levels have {v.shape[0]} entries, expected K+1={ladder.K + 1}")
    c = np.empty_like(v)
    c[0] = v[0]
    for k, lk in enumerate(ladder.L, start=1):
        c[k] = c[k - 1] + lk * v[k]
    return c


def _log_phi(x):
    return -0.5 * (_LOG2PI + np.square(x))


def _mills(x):
    """phi(x) / Phi(x), computed in the log domain."""
    x = np.clip(x, -1e150, 1e150)   # beyond this, x**2 overflows
    return np.exp(_log_phi(x) - log_ndtr(x))


def _check_levels(levels, ladder):
    levels = np.asarray(levels, dtype=float)
    if levels.shape[0] != ladder.K + 1:
        raise ParameterError(
            f"{levels.shape[0]} levels given, expected K+1={ladder.K + 1}")
    if np.any(levels[0] <= 0):
        raise NumericError("level-0 variance must be positive", stage="denoise")
    if ladder.K > 0 and np.any(levels[1:] <= 0):
        raise NumericError("survey level variances must be positive",
                           stage="denoise")
    return levels


# ---------------------------------------------------------------------------
# Gaussian factors: exact for every K and both regimes
# ---------------------------------------------------------------------------

def meanvar_awgn(y, mu, levels, ladder: RsbLadder, v_noise: float) -> PosteriorMoments:
    """Survey denoiser for a Gaussian likelihood N(y | z, v_noise).

    All smoothing integrals are Gaussian, so the ladder output collapses to
    per-level conjugate updates: c_hat_k = (1/c_k + 1/v)^{-1} and the mean
    combines the level-K message with the observation. Identical in both
    regimes.
    """
    if v_noise <= 0:
        raise NumericError(f"noise variance must be positive, got {v_noise}",
                           stage="denoise")
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    levels = _check_levels(levels, ladder)
    c = levels_to_ladder(levels, ladder)
    c_hat = 1.0 / (1.0 / c + 1.0 / v_noise)
    mean = c_hat[-1] * (mu / c[-1] + y / v_noise)
    # per-replica log normalizer: g = -(y - mu)^2 / (2 (v + c_K)) + const
    s = v_noise + c[-1]
    logz = -0.5 * (y - mu) ** 2 / s - 0.5 * np.log(2.0 * np.pi * s)
    return PosteriorMoments(mean, c_hat, logz)


def meanvar_gaussian_prior(prior: GaussianPrior, mu, levels,
                           ladder: RsbLadder) -> PosteriorMoments:
    """Gaussian prior is the same conjugate update with (mean, var) as data."""
    return meanvar_awgn(prior.mean, mu, levels, ladder, prior.var)


# ---------------------------------------------------------------------------
# Two-atom prior, K = 0
# ---------------------------------------------------------------------------

def meanvar_bpsk_k0(prior: BpskPrior, mu, c0, regime: Regime) -> PosteriorMoments:
    mu = np.asarray(mu, dtype=float)
    c0 = np.asarray(c0, dtype=float)
    a = prior.a
    if regime == Regime.MMSE:
        t = np.tanh(a * mu / c0)
        mean = a * t
        var = a ** 2 * (1.0 - t ** 2)
        u = a * mu / c0
        logz = (-0.5 * (mu ** 2 + a ** 2) / c0 + np.logaddexp(u, -u)
                - math.log(2.0) - 0.5 * np.log(2.0 * np.pi * c0))
    else:
        # zero temperature: nearest atom, vanishing curvature
        mean = np.where(mu >= 0, a, -a) * np.ones_like(c0)
        var = np.zeros(np.broadcast(mu, c0).shape)
        logz = -0.5 * (a - np.abs(mu)) ** 2 / c0
    return PosteriorMoments(mean, var[None, ...], logz)


# ---------------------------------------------------------------------------
# Two-atom prior, K = 1, zero-temperature regime (closed form)
# ---------------------------------------------------------------------------

def meanvar_bpsk_k1(mu, v0, v1, L1: float, a: float = 1.0) -> PosteriorMoments:
    """Zero-temperature two-atom survey denoiser at K = 1.

    The level-0 maximization leaves a piecewise Gaussian whose smoothing
    integral splits into two half-line terms Z_+- = exp(A_+-) Phi(B_+-), so

        g = (1/L1) [ log v0 / 2 - log(v0 + L1 v1) / 2 + log(Z_+ + Z_-) ].

    Mean and output ladder follow from the analytic partials of g with
    respect to (mu, v0, v1). Evaluated fully in the log domain so that
    saturated messages (|mu| many standard deviations out) stay finite.
    """
    mu = np.asarray(mu, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    if np.any(v0 <= 0) or np.any(v1 <= 0):
        raise NumericError("v0 and v1 must be positive", stage="denoise")
    if L1 <= 0:
        raise ParameterError(f"L1 must be positive, got {L1}")

    s = v0 + L1 * v1          # cumulative c_1
    r2 = v0 * v1 * s
    r = np.sqrt(r2)

    A_p = -L1 * (mu - a) ** 2 / (2.0 * s)
    A_m = -L1 * (mu + a) ** 2 / (2.0 * s)
    B_p = np.clip((L1 * v1 * a + v0 * mu) / r, -1e150, 1e150)
    B_m = np.clip((L1 * v1 * a - v0 * mu) / r, -1e150, 1e150)

    log_zp = A_p + log_ndtr(B_p)
    log_zm = A_m + log_ndtr(B_m)
    log_zsum = np.logaddexp(log_zp, log_zm)
    w_p = np.exp(log_zp - log_zsum)
    w_m = np.exp(log_zm - log_zsum)
    mills_p = _mills(B_p)
    mills_m = _mills(B_m)

    # partials of the half-line terms
    dA_p_mu = -L1 * (mu - a) / s
    dA_m_mu = -L1 * (mu + a) / s
    dB_p_mu = v0 / r
    dB_m_mu = -v0 / r

    dA_v0 = L1 * (mu - a) ** 2 / (2.0 * s ** 2)
    dA_m_v0 = L1 * (mu + a) ** 2 / (2.0 * s ** 2)
    dr_v0 = v1 * (s + v0) / (2.0 * r)
    dB_p_v0 = mu / r - B_p * dr_v0 / r
    dB_m_v0 = -mu / r - B_m * dr_v0 / r

    dA_v1 = L1 ** 2 * (mu - a) ** 2 / (2.0 * s ** 2)
    dA_m_v1 = L1 ** 2 * (mu + a) ** 2 / (2.0 * s ** 2)
    dr_v1 = v0 * (s + L1 * v1) / (2.0 * r)
    dB_p_v1 = L1 * a / r - B_p * dr_v1 / r
    dB_m_v1 = L1 * a / r - B_m * dr_v1 / r

    # suppressed branches (weight 0) may carry non-finite derivative terms
    def _blend(wp, tp, wm, tm):
        return (np.where(wp > 0.0, wp * tp, 0.0)
                + np.where(wm > 0.0, wm * tm, 0.0))

    dlogz_mu = _blend(w_p, dA_p_mu + mills_p * dB_p_mu,
                      w_m, dA_m_mu + mills_m * dB_m_mu)
    dlogz_v0 = _blend(w_p, dA_v0 + mills_p * dB_p_v0,
                      w_m, dA_m_v0 + mills_m * dB_m_v0)
    dlogz_v1 = _blend(w_p, dA_v1 + mills_p * dB_p_v1,
                      w_m, dA_m_v1 + mills_m * dB_m_v1)

    g1_v0 = 0.5 / v0 - 0.5 / s + dlogz_v0
    g1_v1 = -0.5 * L1 / s + dlogz_v1
    dg_mu = dlogz_mu / L1
    dg_v0 = g1_v0 / L1
    dg_v1 = g1_v1 / L1

    mean = s * dg_mu + mu
    gamma1 = -2.0 * dg_v1 + L1 * dg_mu ** 2
    gamma0 = -2.0 * (dg_v1 - L1 * dg_v0)
    c_hat1 = s - s ** 2 * gamma1
    c_hat0 = v0 - v0 ** 2 * gamma0
    logg = (0.5 * np.log(v0) - 0.5 * np.log(s) + log_zsum) / L1

    if np.any(~np.isfinite(mean)) or np.any(~np.isfinite(c_hat1)):
        raise NumericError("non-finite output in two-atom K=1 denoiser",
                           stage="denoise")
    return PosteriorMoments(mean, np.stack([c_hat0, c_hat1]), logg)


# ---------------------------------------------------------------------------
# Two-atom prior, K = 1, unit-temperature regime (binomial closed form)
# ---------------------------------------------------------------------------

def meanvar_bpsk_mmse_k1(mu, v0, v1, L1: int, a: float = 1.0) -> PosteriorMoments:
    """Unit-temperature two-atom survey denoiser at K = 1.

    exp(L1 g0) with a two-atom factor expands binomially into L1 + 1
    Gaussian terms in the smoothing variable, giving an exact mixture form
    for the log partition; mean and ladder come from its analytic partials.
    """
    L1 = int(round(L1))
    if L1 < 2:
        raise ParameterError("unit-temperature K=1 ladder needs integer L1 >= 2")
    mu = np.asarray(mu, dtype=float)[..., None]
    v0 = np.asarray(v0, dtype=float)[..., None]
    v1 = np.asarray(v1, dtype=float)[..., None]
    if np.any(v0 <= 0) or np.any(v1 <= 0):
        raise NumericError("v0 and v1 must be positive", stage="denoise")

    j = np.arange(L1 + 1, dtype=float)
    log_binom = gammaln(L1 + 1) - gammaln(j + 1) - gammaln(L1 + 1 - j)
    aj = a * (2.0 * j - L1) / L1
    s1 = v1 + v0 / L1

    t = (log_binom - L1 * math.log(2.0)
         - 0.5 * (L1 - 1) * np.log(2.0 * np.pi * v0) - 0.5 * math.log(L1)
         - L1 * (a ** 2 - aj ** 2) / (2.0 * v0)
         - 0.5 * np.log(2.0 * np.pi * s1)
         - (mu - aj) ** 2 / (2.0 * s1))
    g1 = logsumexp(t, axis=-1)
    w = np.exp(t - g1[..., None])

    dt_mu = (aj - mu) / s1
    d_s1 = ((mu - aj) ** 2 - s1) / (2.0 * s1 ** 2)
    dt_v1 = d_s1
    dt_v0 = (-0.5 * (L1 - 1) / v0 + L1 * (a ** 2 - aj ** 2) / (2.0 * v0 ** 2)
             + d_s1 / L1)

    dg_mu = np.sum(w * dt_mu, axis=-1) / L1
    dg_v0 = np.sum(w * dt_v0, axis=-1) / L1
    dg_v1 = np.sum(w * dt_v1, axis=-1) / L1

    v0 = v0[..., 0]
    s = v0 + L1 * v1[..., 0]
    mu = mu[..., 0]
    mean = s * dg_mu + mu
    gamma1 = -2.0 * dg_v1 + L1 * dg_mu ** 2
    gamma0 = 2.0 / (L1 - 1) * (dg_v1 - L1 * dg_v0)
    c_hat1 = s - s ** 2 * gamma1
    c_hat0 = v0 - v0 ** 2 * gamma0
    return PosteriorMoments(mean, np.stack([c_hat0, c_hat1]), g1 / L1)


# ---------------------------------------------------------------------------
# Relaxed two-atom prior, K = 0
# ---------------------------------------------------------------------------

def meanvar_relaxed_k0(prior: RelaxedBpskPrior, mu, c0,
                       regime: Regime) -> PosteriorMoments:
    """Single-level denoiser for the mixture-of-truncated-Gaussians prior."""
    mu = np.asarray(mu, dtype=float)
    c0 = np.asarray(c0, dtype=float)
    c = prior.c
    vbar = 1.0 / (1.0 / c + 1.0 / c0)
    log_prior_norm = math.log(2.0) + log_ndtr(1.0 / math.sqrt(c))
    if regime == Regime.MMSE:
        means = []
        second = []
        logws = []
        sqv = np.sqrt(vbar)
        for sgn in (1.0, -1.0):
            mbar = vbar * (sgn / c + mu / c0)
            z = sgn * mbar / sqv
            logws.append(-0.5 * (mu - sgn) ** 2 / (c + c0)
                         - 0.5 * np.log(2.0 * np.pi * (c + c0)) + log_ndtr(z))
            lam = _mills(z)
            e1 = mbar + sgn * sqv * lam
            e2 = mbar ** 2 + vbar + sgn * mbar * sqv * lam
            means.append(e1)
            second.append(e2)
        logws = np.stack(logws)
        logz = logsumexp(logws, axis=0) - log_prior_norm
        w = np.exp(logws - logsumexp(logws, axis=0))
        mean = w[0] * means[0] + w[1] * means[1]
        m2 = w[0] * second[0] + w[1] * second[1]
        var = m2 - mean ** 2
        return PosteriorMoments(mean, var[None, ...], logz)
    # zero temperature: best of the two half-line ridge solutions
    cand_val = []
    cand_x = []
    for sgn in (1.0, -1.0):
        xbar = vbar * (sgn / c + mu / c0)
        interior = sgn * xbar > 0
        val_int = -0.5 * (mu - sgn) ** 2 / (c + c0)
        val_bnd = -0.5 / c - 0.5 * mu ** 2 / c0
        cand_val.append(np.where(interior, val_int, val_bnd))
        cand_x.append(np.where(interior, xbar, 0.0))
    pick = cand_val[0] >= cand_val[1]
    mean = np.where(pick, cand_x[0], cand_x[1])
    f0 = np.where(pick, cand_val[0], cand_val[1])
    var = vbar * np.ones_like(mean)
    return PosteriorMoments(mean, var[None, ...], f0)
