"""Nested Gauss-Hermite route for the survey denoisers, and cross-checks.

This is the generic evaluation path: each smoothing level is integrated with
Gauss-Hermite nodes centered on that level's mean and variance, the
innermost factor is handled in closed form (Gaussian convolution, atom sums,
truncated-Gaussian mixtures, or zero-temperature maximization), and the
output ladder is assembled from the second moments of the nested bracket
averages rather than by differentiating the log partition. Supported depth
is K <= 2.

In the zero-temperature regime a discrete factor contributes to the bottom
of the output ladder only through the decision boundaries of its maximizer:
a jump of size D at m* adds D * v0 * (tilted density at m*). The smooth part
is the per-branch curvature susceptibility.

``gamma_route_check`` compares this route against the derivative route
(finite differences of the log partition), which ties the two independent
formulations of the same projection together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .channels import (
    AwgnLikelihood,
    BpskPrior,
    GaussianPrior,
    PosteriorMoments,
    Regime,
    RelaxedBpskPrior,
    RsbLadder,
    _check_levels,
    _mills,
    levels_to_ladder,
    meanvar_awgn,
    meanvar_bpsk_k0,
    meanvar_bpsk_k1,
    meanvar_bpsk_mmse_k1,
    meanvar_gaussian_prior,
    meanvar_relaxed_k0,
)
from .errors import NumericError, ParameterError, UnsupportedError

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureConfig:
    order: int = 40

    def __post_init__(self):
        if self.order < 2:
            raise ParameterError(f"order must be >= 2, got {self.order}")


@lru_cache(maxsize=16)
def _gh_nodes(order: int):
    t, w = np.polynomial.hermite.hermgauss(order)
    return t, np.log(w) - 0.5 * math.log(math.pi)


def _log_normal(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * np.log(2.0 * np.pi * var)


# ---------------------------------------------------------------------------
# Innermost-factor kernels
# ---------------------------------------------------------------------------

def _level0(channel, regime: Regime, y, m0, v0):
    """Innermost moments given the bottom smoothing variable.

    Returns (tilt, s0, vpay): the per-replica tilting exponent (log
    partition at unit temperature, best objective value at zero
    temperature), the level-0 posterior mean, and the variance payload
    (posterior variance at unit temperature, smooth susceptibility at zero
    temperature).
    """
    if isinstance(channel, AwgnLikelihood):
        if channel.v <= 0:
            raise NumericError("postulated noise variance must be positive",
                               stage="denoise")
        v = channel.v
        s = v + v0
        vbar = v * v0 / s
        s0 = (v * m0 + v0 * y) / s
        if regime == Regime.MMSE:
            tilt = _log_normal(y, m0, s)
        else:
            tilt = -0.5 * (y - m0) ** 2 / s - 0.5 * math.log(2.0 * math.pi * v)
        return tilt, s0, vbar * np.ones_like(s0)

    if isinstance(channel, GaussianPrior):
        s = channel.var + v0
        vbar = channel.var * v0 / s
        s0 = (channel.var * m0 + v0 * channel.mean) / s
        if regime == Regime.MMSE:
            tilt = _log_normal(channel.mean, m0, s)
        else:
            tilt = (-0.5 * (channel.mean - m0) ** 2 / s
                    - 0.5 * math.log(2.0 * math.pi * channel.var))
        return tilt, s0, vbar * np.ones_like(s0)

    if isinstance(channel, BpskPrior):
        a = channel.a
        if regime == Regime.MMSE:
            u = a * m0 / v0
            tilt = (-0.5 * (m0 ** 2 + a ** 2) / v0 + np.logaddexp(u, -u)
                    - math.log(2.0) - 0.5 * np.log(2.0 * np.pi * v0))
            t = np.tanh(u)
            return tilt, a * t, a ** 2 * (1.0 - t ** 2)
        tilt = -0.5 * (a - np.abs(m0)) ** 2 / v0
        s0 = np.where(m0 >= 0, a, -a) * np.ones_like(m0)
        return tilt, s0, np.zeros_like(s0)

    if isinstance(channel, RelaxedBpskPrior):
        c = channel.c
        vbar = c * v0 / (c + v0)
        if regime == Regime.MMSE:
            out = meanvar_relaxed_k0(channel, m0, v0, Regime.MMSE)
            return out.log_partition, out.mean, out.c_hat[0]
        out = meanvar_relaxed_k0(channel, m0, v0, Regime.MAP)
        interior = out.mean != 0.0
        return out.log_partition, out.mean, np.where(interior, vbar, 0.0)

    raise UnsupportedError(f"no innermost kernel for channel {channel!r}")


def _map_boundaries(channel, v0):
    """Decision-boundary locations and maximizer jumps at zero temperature."""
    if isinstance(channel, BpskPrior):
        return [(0.0, 2.0 * channel.a * np.ones_like(v0))]
    if isinstance(channel, RelaxedBpskPrior):
        return [(0.0, 2.0 * v0 / (v0 + channel.c))]
    return []


def _map_support(channel):
    """Extent of the zero-temperature tilt's peaks, for node placement."""
    if isinstance(channel, BpskPrior):
        return -channel.a, channel.a
    if isinstance(channel, RelaxedBpskPrior):
        r = 1.0 + 4.0 * math.sqrt(channel.c)
        return -r, r
    return None


@lru_cache(maxsize=16)
def _gl_nodes(order: int):
    t, w = np.polynomial.legendre.leggauss(order)
    return t, w


def _inner_nodes(channel, regime: Regime, mc, v0, v1, ell1, order: int):
    """Bottom-level smoothing nodes: m0 values and log-weights.

    The weights absorb the Gaussian N(m0 | mc, v1), so downstream only the
    tilt is added. Smooth tilts use Gauss-Hermite on (mc, v1); kinked
    zero-temperature tilts use composite Gauss-Legendre panels split at the
    decision boundaries, with the frame wide enough to cover both the
    message bulk and the tilt peaks.
    """
    mc = np.asarray(mc, dtype=float)
    v0 = np.broadcast_to(np.asarray(v0, dtype=float), mc.shape)
    v1 = np.broadcast_to(np.asarray(v1, dtype=float), mc.shape)
    if regime == Regime.MMSE or not _map_boundaries(channel, v0):
        t, logw = _gh_nodes(order)
        m0 = mc[..., None] + np.sqrt(2.0 * v1)[..., None] * t
        return m0, np.broadcast_to(logw, m0.shape)

    lo_peak, hi_peak = _map_support(channel)
    panels = max(8, order // 2)
    gl_order = max(8, order // 4)
    t_gl, w_gl = _gl_nodes(gl_order)

    wt = 8.0 * np.sqrt(v0 / ell1)
    sv = 8.0 * np.sqrt(v1)
    lo = np.minimum(mc - sv, lo_peak - wt)
    hi = np.maximum(mc + sv, hi_peak + wt)
    # two segments per (single) boundary at zero; panel edges hit the kink
    segs = ((lo, np.zeros_like(lo)), (np.zeros_like(hi), hi))
    frac = (np.arange(panels) + 0.5) / panels
    nodes, logws = [], []
    for seg_lo, seg_hi in segs:
        width = (seg_hi - seg_lo) / panels
        centers = seg_lo[..., None] + (seg_hi - seg_lo)[..., None] * frac
        half = 0.5 * width[..., None]
        m0 = centers[..., None] + half[..., None] * t_gl        # (..., P, q)
        lw = (np.log(half[..., None] * w_gl)
              + _log_normal(m0, mc[..., None, None], v1[..., None, None]))
        nodes.append(m0.reshape(mc.shape + (-1,)))
        logws.append(lw.reshape(mc.shape + (-1,)))
    return np.concatenate(nodes, axis=-1), np.concatenate(logws, axis=-1)


# ---------------------------------------------------------------------------
# Nested bracket evaluation
# ---------------------------------------------------------------------------

def meanvar_quadrature(channel, y, mu, levels, ladder: RsbLadder,
                       quad: QuadratureConfig = QuadratureConfig()) -> PosteriorMoments:
    """Survey denoiser via nested Gauss-Hermite bracket averages, K <= 2.

    ``y`` is the per-coordinate observation for likelihood channels and
    ignored (may be None) for priors. ``levels`` holds the K+1 level
    variances, broadcast against ``mu``.
    """
    K = ladder.K
    if K > 2:
        raise UnsupportedError(f"quadrature route supports K <= 2, got K={K}")
    regime = ladder.regime
    mu_in = np.asarray(mu, dtype=float)
    shape = mu_in.shape
    mu = np.atleast_1d(mu_in).ravel()
    n = mu.shape[0]
    levels = _check_levels(levels, ladder)
    if levels.ndim == 1:
        levels = levels[:, None]
    levels = np.broadcast_to(levels.reshape(K + 1, -1), (K + 1, n)).astype(float)
    if y is not None:
        y = np.broadcast_to(np.asarray(y, dtype=float).ravel(), (n,))

    def _finish(mean, vhat_levels, logg):
        c_hat = levels_to_ladder(vhat_levels, ladder)
        if shape == ():
            return PosteriorMoments(float(mean[0]), c_hat[:, 0],
                                    float(logg[0]))
        return PosteriorMoments(mean.reshape(shape),
                                c_hat.reshape((K + 1,) + shape),
                                logg.reshape(shape))

    v0 = levels[0]
    if K == 0:
        tilt, s0, vpay = _level0(channel, regime, y, mu, v0)
        return _finish(s0, vpay[None, :], tilt)

    t1, logw1 = _gh_nodes(quad.order)
    L = ladder.L
    ell1 = L[0]

    if K == 1:
        v1 = levels[1]
        m0, logw0 = _inner_nodes(channel, regime, mu, v0, v1, ell1, quad.order)
        y0 = None if y is None else y[:, None]
        tilt, s0, vpay = _level0(channel, regime, y0, m0, v0[:, None])
        logw = logw0 + ell1 * tilt
        logz1 = logsumexp(logw, axis=1)
        p = np.exp(logw - logz1[:, None])
        mean = np.sum(p * s0, axis=1)
        b0 = np.sum(p * s0 ** 2, axis=1)
        ev = np.sum(p * vpay, axis=1)
        vhat1 = b0 - mean ** 2
        vhat0 = ev
        if regime == Regime.MAP:
            for m_star, jump in _map_boundaries(channel, v0):
                tilt_b, _, _ = _level0(channel, regime, y, m_star * np.ones(n), v0)
                log_rho = _log_normal(m_star, mu, v1) + ell1 * tilt_b - logz1
                vhat0 = vhat0 + jump * v0 * np.exp(log_rho)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(vhat1))):
            raise NumericError("non-finite bracket average at level 1",
                               stage="denoise")
        return _finish(mean, np.stack([vhat0, vhat1]), logz1 / L[0])

    # K == 2
    v1, v2 = levels[1], levels[2]
    ell2 = L[1] / L[0]
    m1 = mu[:, None] + np.sqrt(2.0 * v2)[:, None] * t1[None, :]        # (n, q)
    m0, logw0 = _inner_nodes(channel, regime, m1, v0[:, None], v1[:, None],
                             ell1, quad.order)
    y0 = None if y is None else y[:, None, None]
    tilt, s0, vpay = _level0(channel, regime, y0, m0, v0[:, None, None])
    logw_in = logw0 + ell1 * tilt
    g1 = logsumexp(logw_in, axis=2)                                    # (n, q)
    p1 = np.exp(logw_in - g1[:, :, None])
    s1 = np.sum(p1 * s0, axis=2)
    b0_1 = np.sum(p1 * s0 ** 2, axis=2)
    ev_1 = np.sum(p1 * vpay, axis=2)
    bdry_1 = np.zeros_like(s1)
    if regime == Regime.MAP:
        for m_star, jump in _map_boundaries(channel, v0):
            tilt_b, _, _ = _level0(channel, regime, y[:, None] if y is not None else None,
                                   m_star * np.ones_like(m1), v0[:, None])
            log_rho = _log_normal(m_star, m1, v1[:, None]) + ell1 * tilt_b - g1
            bdry_1 += (jump * v0)[:, None] * np.exp(log_rho)

    logw_out = logw1[None, :] + ell2 * g1
    g2 = logsumexp(logw_out, axis=1)
    p2 = np.exp(logw_out - g2[:, None])
    mean = np.sum(p2 * s1, axis=1)
    b1 = np.sum(p2 * s1 ** 2, axis=1)
    b0 = np.sum(p2 * b0_1, axis=1)
    ev = np.sum(p2 * ev_1, axis=1)
    bdry = np.sum(p2 * bdry_1, axis=1)
    vhat2 = b1 - mean ** 2
    vhat1 = b0 - b1
    vhat0 = ev + bdry
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(vhat2))):
        raise NumericError("non-finite bracket average at level 2",
                           stage="denoise")
    return _finish(mean, np.stack([vhat0, vhat1, vhat2]), g2 / L[1])


# ---------------------------------------------------------------------------
# Dispatcher: closed forms where available, nested quadrature otherwise
# ---------------------------------------------------------------------------

def posterior_moments(channel, y, mu, levels, ladder: RsbLadder,
                      quad: QuadratureConfig = QuadratureConfig()) -> PosteriorMoments:
    """MeanVar step: route each channel/ladder pair to its best evaluator."""
    K = ladder.K
    levels = _check_levels(levels, ladder)
    if isinstance(channel, AwgnLikelihood):
        return meanvar_awgn(y, mu, levels, ladder, channel.v)
    if isinstance(channel, GaussianPrior):
        return meanvar_gaussian_prior(channel, mu, levels, ladder)
    if isinstance(channel, BpskPrior):
        if K == 0:
            return meanvar_bpsk_k0(channel, mu, levels[0], ladder.regime)
        if K == 1 and ladder.regime == Regime.MAP:
            return meanvar_bpsk_k1(np.asarray(mu, dtype=float), levels[0],
                                   levels[1], ladder.L[0], channel.a)
        if K == 1:
            return meanvar_bpsk_mmse_k1(np.asarray(mu, dtype=float), levels[0],
                                        levels[1], ladder.L[0], channel.a)
        return meanvar_quadrature(channel, y, mu, levels, ladder, quad)
    if isinstance(channel, RelaxedBpskPrior):
        if K == 0:
            return meanvar_relaxed_k0(channel, mu, levels[0], ladder.regime)
        return meanvar_quadrature(channel, y, mu, levels, ladder, quad)
    raise UnsupportedError(f"unknown channel {channel!r}")


# ---------------------------------------------------------------------------
# Derivative-route consistency check
# ---------------------------------------------------------------------------

def _log_partition(channel, y, mu, levels, ladder, quad):
    out = meanvar_quadrature(channel, y, mu, levels, ladder, quad)
    return out.log_partition


def gamma_route_check(channel, y, mu, levels, ladder: RsbLadder,
                      quad: QuadratureConfig = QuadratureConfig(),
                      step: float = 1e-6) -> float:
    """Max |relative| gap between bracket-route and derivative-route ladders.

    The derivative route forms the output ladder from central finite
    differences of the log partition g: the top level uses
    -2 dg/dv_K + L_K (dg/dmu)^2, interior levels the weighted two-point
    differences, and the bottom level the regime-dependent combination of
    dg/dv_1 and dg/dv_0.
    """
    K = ladder.K
    mu = float(mu)
    levels = np.asarray(levels, dtype=float).reshape(K + 1)
    bracket = meanvar_quadrature(channel, y, mu, levels, ladder, quad)
    c = levels_to_ladder(levels, ladder)

    if K == 0:
        if ladder.regime != Regime.MMSE:
            raise UnsupportedError(
                "the K=0 derivative route is defined at unit temperature only")
        # degenerate ladder: unit-temperature conjugate identity with L = 1
        h = step * max(1.0, abs(mu))
        hv = step * levels[0]
        gp = _log_partition(channel, y, mu + h, levels, ladder, quad)
        gm = _log_partition(channel, y, mu - h, levels, ladder, quad)
        dg_mu = (gp - gm) / (2 * h)
        lv = levels.copy()
        lv[0] = levels[0] + hv
        gp = _log_partition(channel, y, mu, lv, ladder, quad)
        lv[0] = levels[0] - hv
        gm = _log_partition(channel, y, mu, lv, ladder, quad)
        dg_v0 = (gp - gm) / (2 * hv)
        gamma = -2.0 * dg_v0 + dg_mu ** 2
        c_hat = np.array([c[0] - c[0] ** 2 * gamma])
        mean = c[0] * dg_mu + mu
    else:
        L = ladder.L

        def g_at(mu_, lv_):
            return _log_partition(channel, y, mu_, lv_, ladder, quad)

        h = step * max(1.0, abs(mu))
        dg_mu = (g_at(mu + h, levels) - g_at(mu - h, levels)) / (2 * h)
        dg_v = np.empty(K + 1)
        for k in range(K + 1):
            hv = step * levels[k]
            lv = levels.copy()
            lv[k] = levels[k] + hv
            gp = g_at(mu, lv)
            lv[k] = levels[k] - hv
            gm = g_at(mu, lv)
            dg_v[k] = (gp - gm) / (2 * hv)

        gamma = np.empty(K + 1)
        gamma[K] = -2.0 * dg_v[K] + L[K - 1] * dg_mu ** 2
        if ladder.regime == Regime.MAP:
            gamma[0] = -2.0 * (dg_v[1] - L[0] * dg_v[0])
        else:
            if L[0] == 1:
                raise ParameterError("bottom-level check needs L1 >= 2 at unit temperature")
            gamma[0] = 2.0 / (L[0] - 1.0) * (dg_v[1] - L[0] * dg_v[0])
        for k in range(1, K):
            ratio = L[k] / L[k - 1]
            gamma[k] = 2.0 / (ratio - 1.0) * (dg_v[k + 1] - ratio * dg_v[k])
        c_hat = c - c ** 2 * gamma
        mean = c[K] * dg_mu + mu

    scale = np.maximum(np.abs(np.append(bracket.c_hat, bracket.mean)), 1e-3)
    gaps = np.abs(np.append(bracket.c_hat - c_hat, bracket.mean - mean)) / scale
    return float(np.max(gaps))
