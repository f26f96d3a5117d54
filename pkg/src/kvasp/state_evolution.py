"""Scalar state evolution of the survey engine, and fixed-point residuals.

The recursion tracks, per direction and side, the cumulative variance
ladders plus four pairs of macroscopic message statistics (a signal-overlap
coefficient and a noise variance each). Moments that involve the factor
nodes are taken under the asymptotic joint law of (truth, message) using
tensor Gauss-Hermite quadrature with the denoisers of
:mod:`kvasp.quadrature`; moments that involve the measurement matrix are
sample averages over the empirical spectrum.

``saddle_residual`` maps a converged state onto the extremum conditions of
the replica free energy (hatted precisions are ladder precision
differences, unhatted order parameters are ladder value differences) and
reports every equation's residual, together with the forward/backward merge
identities that hold only at a fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .channels import (
    AwgnLikelihood,
    BpskPrior,
    GaussianPrior,
    ModelChannels,
    RelaxedBpskPrior,
    Regime,
    RsbLadder,
    ladder_to_levels,
    levels_to_ladder,
)
from .errors import NumericError, ParameterError
from .quadrature import QuadratureConfig, _gh_nodes, posterior_moments


@dataclass(frozen=True)
class SeConfig:
    ladder: RsbLadder
    iters: int = 30
    init_spread: float = 0.5
    clamp_min: float = 1e-11
    clamp_max: float = 1e8
    v_floor: float = 1e-14
    f_hat_floor: float = 1e-12   # keeps the message measures non-degenerate
    tol: float = 1e-10
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)


@dataclass
class SeState:
    """Macroscopic parameters; ladders are (K+1,) arrays."""

    ex2: float                  # E[x0^2] under the true prior
    ez2: float                  # E[z0^2] = mean(lambda) ex2 / alpha
    c_x_plus: np.ndarray
    c_z_plus: np.ndarray
    d_hat_1z: float
    f_hat_1z: float
    d_hat_2x: float
    f_hat_2x: float
    c_x_minus: np.ndarray | None = None
    c_z_minus: np.ndarray | None = None
    chat_x_minus: np.ndarray | None = None
    chat_z_minus: np.ndarray | None = None
    chat_x_plus: np.ndarray | None = None
    chat_z_plus: np.ndarray | None = None
    d_hat_1x: float = 0.0
    f_hat_1x: float = 0.0
    d_hat_2z: float = 0.0
    f_hat_2z: float = 0.0
    d_x_minus: float = 0.0
    f_x_minus: float = 0.0
    d_x_plus: float = 0.0
    f_x_plus: float = 0.0
    d_z_minus: float = 0.0
    f_z_minus: float = 0.0
    d_z_plus: float = 0.0
    f_z_plus: float = 0.0
    iteration: int = 0
    clamp_count: int = 0

    def flatten(self) -> np.ndarray:
        parts = [self.c_x_plus, self.c_z_plus]
        for arr in (self.c_x_minus, self.c_z_minus, self.chat_x_minus,
                    self.chat_z_minus, self.chat_x_plus, self.chat_z_plus):
            if arr is not None:
                parts.append(arr)
        parts.append([self.d_hat_1z, self.f_hat_1z, self.d_hat_2x, self.f_hat_2x,
                      self.d_hat_1x, self.f_hat_1x, self.d_hat_2z, self.f_hat_2z,
                      self.d_x_minus, self.f_x_minus, self.d_x_plus, self.f_x_plus,
                      self.d_z_minus, self.f_z_minus, self.d_z_plus, self.f_z_plus])
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float))
                               for p in parts])


def se_init(spectrum, alpha: float, channels: ModelChannels,
            config: SeConfig) -> SeState:
    """Mirror of the algorithm's zero-mean initialization.

    The starting messages carry no signal (overlap coefficients zero) and
    their energy matches the initialized ladders, so the noise parameters
    are second-moment / ladder-top^2.
    """
    spectrum = np.asarray(spectrum, dtype=float)
    if spectrum.size == 0:
        raise ParameterError("empty spectrum")
    K = config.ladder.K
    ex2 = channels.true_prior.second_moment()
    mean_lam = float(np.mean(spectrum))
    ez2 = mean_lam * ex2 / alpha
    spread = 1.0 + config.init_spread * np.arange(K + 1)
    c_x = channels.post_prior.variance() * spread
    c_z = c_x * mean_lam / alpha
    return SeState(
        ex2=ex2, ez2=ez2,
        c_x_plus=c_x, c_z_plus=c_z,
        d_hat_1z=0.0, f_hat_1z=ez2 / c_z[-1] ** 2,
        d_hat_2x=0.0, f_hat_2x=ex2 / c_x[-1] ** 2,
    )


def _scalar_cavity(c_hat, c_in, lo, hi):
    c_hat = np.maximum(np.asarray(c_hat, dtype=float), lo)
    with np.errstate(divide="ignore"):
        prec = 1.0 / c_hat - 1.0 / c_in
        c = 1.0 / prec
    count = int(np.sum(prec <= 0.0))
    c = np.where(prec <= 0.0, hi, c)
    clipped = np.clip(c, lo, hi)
    count += int(np.sum(clipped != c))
    c = np.maximum.accumulate(clipped)
    count += int(np.sum(c != clipped))
    return c, count


def _floored_levels(c_ladder, ladder, v_floor):
    return np.maximum(ladder_to_levels(c_ladder, ladder), v_floor)


# ---------------------------------------------------------------------------
# Measure-side moments
# ---------------------------------------------------------------------------

def _prior_nodes(prior, order: int):
    """Quadrature nodes and log-weights for the true input distribution."""
    t, logw = _gh_nodes(order)
    if isinstance(prior, BpskPrior):
        x = np.array([prior.a, -prior.a])
        lw = np.full(2, -math.log(2.0))
    elif isinstance(prior, GaussianPrior):
        x = prior.mean + math.sqrt(2.0 * prior.var) * t
        lw = logw.copy()
    elif isinstance(prior, RelaxedBpskPrior):
        scale = math.sqrt(2.0 * prior.c)
        xs, ws = [], []
        for sgn in (1.0, -1.0):
            xh = sgn + scale * t
            wh = logw - math.log(2.0)
            wh = np.where(sgn * xh > 0, wh, -np.inf)
            xs.append(xh)
            ws.append(wh)
        x = np.concatenate(xs)
        lw = np.concatenate(ws)
    else:
        raise ParameterError(f"no truth nodes for prior {prior!r}")
    return x, lw - logsumexp(lw)


def se_measure_moments_z(c_z_plus, d_hat_1z, f_hat_1z, ez2, channels:
                         ModelChannels, ladder: RsbLadder,
                         quad: QuadratureConfig, v_floor: float = 1e-14):
    """Output-side moments under the joint law of (y, z0, incoming message).

    z0 is centered Gaussian with variance ez2; the message is
    c_K (d z0 + sqrt(f) xi); y follows the true likelihood. Returns
    (d_z, f_z, vhat_levels) with the levels averaged in natural order.
    """
    if f_hat_1z <= 0:
        raise NumericError("degenerate output message measure", stage="se-z")
    if not isinstance(channels.true_likelihood, AwgnLikelihood):
        raise ParameterError("true likelihood must be Gaussian")
    v_t = channels.true_likelihood.v
    levels = _floored_levels(c_z_plus, ladder, v_floor)
    c_top = levels_to_ladder(levels, ladder)[-1]

    t, logw = _gh_nodes(quad.order)
    t = math.sqrt(2.0) * t          # standard-normal abscissae
    z0 = math.sqrt(ez2) * t
    if v_t > 0:
        grids = np.meshgrid(z0, t, t, indexing="ij")
        lw = logw[:, None, None] + logw[None, :, None] + logw[None, None, :]
        z0g, xig, wg = (g.ravel() for g in grids)
        y = z0g + math.sqrt(v_t) * wg
    else:
        grids = np.meshgrid(z0, t, indexing="ij")
        lw = logw[:, None] + logw[None, :]
        z0g, xig = (g.ravel() for g in grids)
        y = z0g
    w = np.exp(lw.ravel() - logsumexp(lw))
    mu = c_top * (d_hat_1z * z0g + math.sqrt(f_hat_1z) * xig)

    out = posterior_moments(channels.post_likelihood, y, mu, levels, ladder, quad)
    vloc = ladder_to_levels(out.c_hat, ladder)
    d_z = float(np.sum(w * z0g * out.mean))
    f_z = float(np.sum(w * out.mean ** 2))
    vhat = vloc.copy() if vloc.ndim == 1 else vloc @ w
    return d_z, f_z, vhat


def se_measure_moments_x(c_x_minus, d_hat_1x, f_hat_1x, channels:
                         ModelChannels, ladder: RsbLadder,
                         quad: QuadratureConfig, v_floor: float = 1e-14):
    """Input-side moments under the joint law of (x0, incoming message)."""
    if f_hat_1x <= 0:
        raise NumericError("degenerate input message measure", stage="se-x")
    levels = _floored_levels(c_x_minus, ladder, v_floor)
    c_top = levels_to_ladder(levels, ladder)[-1]

    x0, logw_x = _prior_nodes(channels.true_prior, quad.order)
    t, logw = _gh_nodes(quad.order)
    t = math.sqrt(2.0) * t
    grids = np.meshgrid(x0, t, indexing="ij")
    lw = logw_x[:, None] + logw[None, :]
    x0g, xig = (g.ravel() for g in grids)
    w = np.exp(lw.ravel() - logsumexp(lw))
    mu = c_top * (d_hat_1x * x0g + math.sqrt(f_hat_1x) * xig)

    out = posterior_moments(channels.post_prior, None, mu, levels, ladder, quad)
    vloc = ladder_to_levels(out.c_hat, ladder)
    d_x = float(np.sum(w * x0g * out.mean))
    f_x = float(np.sum(w * out.mean ** 2))
    vhat = vloc.copy() if vloc.ndim == 1 else vloc @ w
    return d_x, f_x, vhat


# ---------------------------------------------------------------------------
# The recursion
# ---------------------------------------------------------------------------

def se_iterate(state: SeState, spectrum, alpha: float,
               channels: ModelChannels, config: SeConfig) -> SeState:
    lam = np.asarray(spectrum, dtype=float)
    lad = config.ladder
    K = lad.K
    lo, hi = config.clamp_min, config.clamp_max
    ex2, ez2 = state.ex2, state.ez2
    clamps = state.clamp_count

    f1z = max(state.f_hat_1z, config.f_hat_floor)
    c_z_plus_eff = levels_to_ladder(
        _floored_levels(state.c_z_plus, lad, config.v_floor), lad)
    d_z_m, f_z_m, vhat_z = se_measure_moments_z(
        c_z_plus_eff, state.d_hat_1z, f1z, ez2, channels, lad,
        config.quad, config.v_floor)
    chat_z_m = levels_to_ladder(vhat_z, lad)
    c_z_m, nc = _scalar_cavity(chat_z_m, c_z_plus_eff, lo, hi)
    clamps += nc
    chat_z_m = np.maximum(chat_z_m, lo)
    d2z = d_z_m / (ez2 * chat_z_m[-1]) - state.d_hat_1z
    f2z = (f_z_m - d_z_m ** 2 / ez2) / chat_z_m[-1] ** 2 - f1z

    chat_x_m = np.array([float(np.mean(1.0 / (1.0 / state.c_x_plus[k]
                                              + lam / c_z_m[k])))
                         for k in range(K + 1)])
    denom_top = 1.0 / state.c_x_plus[-1] + lam / c_z_m[-1]
    d_x_m = ex2 * float(np.mean((state.d_hat_2x + d2z * lam) / denom_top))
    f_x_m = (ex2 * float(np.mean((state.d_hat_2x + d2z * lam) ** 2 / denom_top ** 2))
             + float(np.mean((state.f_hat_2x + f2z * lam) / denom_top ** 2)))
    c_x_m, nc = _scalar_cavity(chat_x_m, state.c_x_plus, lo, hi)
    clamps += nc
    d1x = d_x_m / (ex2 * chat_x_m[-1]) - state.d_hat_2x
    f1x = (f_x_m - d_x_m ** 2 / ex2) / chat_x_m[-1] ** 2 - state.f_hat_2x

    f1x_used = max(f1x, config.f_hat_floor)
    c_x_m_eff = levels_to_ladder(
        _floored_levels(c_x_m, lad, config.v_floor), lad)
    d_x_p, f_x_p, vhat_x = se_measure_moments_x(
        c_x_m_eff, d1x, f1x_used, channels, lad, config.quad, config.v_floor)
    chat_x_p = levels_to_ladder(vhat_x, lad)
    c_x_p, nc = _scalar_cavity(chat_x_p, c_x_m_eff, lo, hi)
    clamps += nc
    chat_x_p = np.maximum(chat_x_p, lo)
    d2x = d_x_p / (ex2 * chat_x_p[-1]) - d1x
    f2x = (f_x_p - d_x_p ** 2 / ex2) / chat_x_p[-1] ** 2 - f1x

    chat_z_p = np.array([float(np.mean(lam / (1.0 / c_x_p[k] + lam / c_z_m[k])))
                         / alpha for k in range(K + 1)])
    denom_top = 1.0 / c_x_p[-1] + lam / c_z_m[-1]
    d_z_p = ex2 / alpha * float(np.mean(lam * (d2x + d2z * lam) / denom_top))
    f_z_p = (ex2 / alpha * float(np.mean(lam * (d2x + d2z * lam) ** 2
                                         / denom_top ** 2))
             + float(np.mean(lam * (f2x + f2z * lam) / denom_top ** 2)) / alpha)
    c_z_p, nc = _scalar_cavity(chat_z_p, c_z_m, lo, hi)
    clamps += nc
    d1z = d_z_p / (ez2 * chat_z_p[-1]) - d2z
    f1z_new = (f_z_p - d_z_p ** 2 / ez2) / chat_z_p[-1] ** 2 - f2z

    return replace(
        state,
        c_x_plus=c_x_p, c_z_plus=c_z_p,
        c_x_minus=c_x_m, c_z_minus=c_z_m,
        chat_x_minus=chat_x_m, chat_z_minus=chat_z_m,
        chat_x_plus=chat_x_p, chat_z_plus=chat_z_p,
        d_hat_1z=d1z, f_hat_1z=f1z_new,
        d_hat_2x=d2x, f_hat_2x=f2x,
        d_hat_1x=d1x, f_hat_1x=f1x,
        d_hat_2z=d2z, f_hat_2z=f2z,
        d_x_minus=d_x_m, f_x_minus=f_x_m,
        d_x_plus=d_x_p, f_x_plus=f_x_p,
        d_z_minus=d_z_m, f_z_minus=f_z_m,
        d_z_plus=d_z_p, f_z_plus=f_z_p,
        iteration=state.iteration + 1,
        clamp_count=clamps,
    )


@dataclass
class SeResult:
    mse_trace: list
    state: SeState
    delta: float    # last iterate-to-iterate max-abs change


def se_mse(state: SeState) -> float:
    """(ex2 + F - 2 D) / ex2 for the current input-side estimate overlap."""
    return (state.ex2 + state.f_x_plus - 2.0 * state.d_x_plus) / state.ex2


def se_run(spectrum, alpha: float, channels: ModelChannels,
           config: SeConfig, until_converged: bool = False,
           max_iters: int = 500) -> SeResult:
    """Run the recursion for ``config.iters`` sweeps (or to convergence)."""
    state = se_init(spectrum, alpha, channels, config)
    trace = []
    delta = np.inf
    limit = max_iters if until_converged else config.iters
    prev = None
    for _ in range(limit):
        state = se_iterate(state, spectrum, alpha, channels, config)
        trace.append(se_mse(state))
        vec = state.flatten()
        if prev is not None and vec.size == prev.size:
            delta = float(np.max(np.abs(vec - prev)))
            if until_converged and delta < config.tol:
                break
        prev = vec
    return SeResult(trace, state, delta)


# ---------------------------------------------------------------------------
# Fixed-point residuals
# ---------------------------------------------------------------------------

def _precision_diffs(c_ladder, L):
    """chi-hat and level couplings: 1/c_0 and -(1/L_k)(1/c_k - 1/c_{k-1})."""
    chi = 1.0 / c_ladder[0]
    hs = [-(1.0 / c_ladder[k] - 1.0 / c_ladder[k - 1]) / L[k - 1]
          for k in range(1, len(c_ladder))]
    return chi, np.array(hs)


def _value_diffs(chat, L):
    """chi and couplings of the unhatted ladder: c_0 and (c_k - c_{k-1})/L_k."""
    chi = chat[0]
    hs = [(chat[k] - chat[k - 1]) / L[k - 1] for k in range(1, len(chat))]
    return chi, np.array(hs)


def saddle_residual(state: SeState, spectrum, alpha: float,
                    channels: ModelChannels, config: SeConfig,
                    check_tol: float = 1e-7) -> dict:
    """Evaluate every replica extremum condition at a converged state.

    Raises when the state is not a fixed point (one extra sweep moves it by
    more than ``check_tol``). Returns {name: residual}; include the merge
    identities that equate forward and backward moments.
    """
    nxt = se_iterate(state, spectrum, alpha, channels, config)
    delta = float(np.max(np.abs(nxt.flatten() - state.flatten())))
    if delta > check_tol:
        raise ParameterError(
            f"state is not converged (one sweep moves it by {delta:.3e})")

    lam = np.asarray(spectrum, dtype=float)
    lad = config.ladder
    L = np.asarray(lad.L, dtype=float)
    K = lad.K
    ex2, ez2 = state.ex2, state.ez2
    res = {}

    res["moment-z"] = ez2 - float(np.mean(lam)) * ex2 / alpha

    chi1x, h1x = _precision_diffs(state.c_x_minus, L)
    chi2x, h2x = _precision_diffs(state.c_x_plus, L)
    chi1z, h1z = _precision_diffs(state.c_z_plus, L)
    chi2z, h2z = _precision_diffs(state.c_z_minus, L)
    chix, hx = _value_diffs(state.chat_x_minus, L)
    chiz, hz = _value_diffs(state.chat_z_minus, L)
    dx, fx = state.d_x_minus, state.f_x_minus
    dz, fz = state.d_z_minus, state.f_z_minus
    d1x, f1x = state.d_hat_1x, state.f_hat_1x
    d2x, f2x = state.d_hat_2x, state.f_hat_2x
    d1z, f1z = state.d_hat_1z, state.f_hat_1z
    d2z, f2z = state.d_hat_2z, state.f_hat_2z

    # hat-parameter equations (precision balance at each node)
    sx = chix + float(np.sum(L * hx)) if K else chix
    sz = chiz + float(np.sum(L * hz)) if K else chiz
    res["hat-d-x"] = d1x + d2x - dx / (ex2 * sx)
    res["hat-f-x"] = f1x + f2x + dx ** 2 / (ex2 * sx ** 2) - fx / sx ** 2
    res["hat-chi-x"] = chi1x + chi2x - 1.0 / chix
    res["hat-d-z"] = d1z + d2z - dz / (ez2 * sz)
    res["hat-f-z"] = f1z + f2z + dz ** 2 / (ez2 * sz ** 2) - fz / sz ** 2
    res["hat-chi-z"] = chi1z + chi2z - 1.0 / chiz
    for k in range(1, K + 1):
        px = chix + float(np.sum(L[:k] * hx[:k]))
        px_prev = chix + float(np.sum(L[:k - 1] * hx[:k - 1]))
        res[f"hat-H-x-{k}"] = (h1x[k - 1] + h2x[k - 1]
                               + (1.0 / px - 1.0 / px_prev) / L[k - 1])
        pz = chiz + float(np.sum(L[:k] * hz[:k]))
        pz_prev = chiz + float(np.sum(L[:k - 1] * hz[:k - 1]))
        res[f"hat-H-z-{k}"] = (h1z[k - 1] + h2z[k - 1]
                               + (1.0 / pz - 1.0 / pz_prev) / L[k - 1])

    # spectral equations (resolvent averages of the hatted parameters)
    def prec_x(j):
        return chi2x - float(np.sum(L[:j] * h2x[:j]))

    def prec_z(j):
        return chi2z - float(np.sum(L[:j] * h2z[:j]))

    den = prec_x(K) + lam * prec_z(K)
    res["spec-D-x"] = dx - ex2 * float(np.mean((d2x + lam * d2z) / den))
    res["spec-F-x"] = fx - (ex2 * float(np.mean((d2x + lam * d2z) ** 2 / den ** 2))
                            + float(np.mean((f2x + lam * f2z) / den ** 2)))
    res["spec-chi-x"] = chix - float(np.mean(1.0 / (chi2x + lam * chi2z)))
    res["spec-D-z"] = dz - ex2 / alpha * float(np.mean(lam * (d2x + lam * d2z) / den))
    res["spec-F-z"] = fz - (ex2 / alpha * float(np.mean(lam * (d2x + lam * d2z) ** 2
                                                        / den ** 2))
                            + float(np.mean(lam * (f2x + lam * f2z) / den ** 2)) / alpha)
    res["spec-chi-z"] = chiz - float(np.mean(lam / (chi2x + lam * chi2z))) / alpha
    for k in range(1, K + 1):
        dk = prec_x(k) + lam * prec_z(k)
        dk_prev = prec_x(k - 1) + lam * prec_z(k - 1)
        res[f"spec-H-x-{k}"] = hx[k - 1] - (float(np.mean(1.0 / dk))
                                            - float(np.mean(1.0 / dk_prev))) / L[k - 1]
        res[f"spec-H-z-{k}"] = hz[k - 1] - (float(np.mean(lam / dk))
                                            - float(np.mean(lam / dk_prev))) / (alpha * L[k - 1])

    # measure equations (factor-node moments recomputed at the fixed point)
    d_z_m, f_z_m, vhat_z = se_measure_moments_z(
        state.c_z_plus, d1z, max(f1z, config.f_hat_floor), ez2, channels,
        lad, config.quad, config.v_floor)
    res["meas-D-z"] = dz - d_z_m
    res["meas-F-z"] = fz - f_z_m
    merged_vz = ladder_to_levels(state.chat_z_minus, lad)
    for k in range(K + 1):
        res[f"meas-vhat-z-{k}"] = merged_vz[k] - vhat_z[k]

    d_x_m, f_x_m, vhat_x = se_measure_moments_x(
        state.c_x_minus, d1x, max(f1x, config.f_hat_floor), channels,
        lad, config.quad, config.v_floor)
    res["meas-D-x"] = dx - d_x_m
    res["meas-F-x"] = fx - f_x_m
    merged_vx = ladder_to_levels(state.chat_x_plus, lad)
    for k in range(K + 1):
        res[f"meas-vhat-x-{k}"] = merged_vx[k] - vhat_x[k]

    # merge identities (forward equals backward at a fixed point)
    res["merge-D-z"] = state.d_z_minus - state.d_z_plus
    res["merge-F-z"] = state.f_z_minus - state.f_z_plus
    res["merge-D-x"] = state.d_x_minus - state.d_x_plus
    res["merge-F-x"] = state.f_x_minus - state.f_x_plus
    for k in range(K + 1):
        res[f"merge-chat-z-{k}"] = state.chat_z_minus[k] - state.chat_z_plus[k]
        res[f"merge-chat-x-{k}"] = state.chat_x_minus[k] - state.chat_x_plus[k]
    return res
