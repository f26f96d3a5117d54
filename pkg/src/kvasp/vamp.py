"""Reference single-level vector message passing (diagonal-covariance EP).

Written independently of :mod:`kvasp.engine` as the degenerate-case oracle:
a run of the survey engine with an empty ladder must reproduce these
messages elementwise. Messages are per-coordinate (mean, variance) pairs;
the common denoisers are inlined, anything exotic falls back to the shared
single-level channel forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .channels import (
    AwgnLikelihood,
    BpskPrior,
    GaussianPrior,
    Regime,
    meanvar_bpsk_k0,
    meanvar_relaxed_k0,
)
from .errors import NumericError


@dataclass
class VampTrace:
    """Per-iteration message snapshots for the reduction comparison."""

    mu_x_plus: list
    c_x_plus: list
    mu_z_plus: list
    c_z_plus: list
    x_hat: list


def _denoise_prior(prior, mu, c, regime):
    if isinstance(prior, GaussianPrior):
        v = 1.0 / (1.0 / c + 1.0 / prior.var)
        return v * (mu / c + prior.mean / prior.var), v
    if isinstance(prior, BpskPrior):
        if regime == Regime.MMSE:
            t = np.tanh(prior.a * mu / c)
            return prior.a * t, prior.a ** 2 * (1.0 - t ** 2)
        return np.where(mu >= 0, prior.a, -prior.a) * np.ones_like(c), np.zeros_like(mu)
    out = meanvar_relaxed_k0(prior, mu, c, regime)
    return out.mean, out.c_hat[0]


def _denoise_likelihood(likelihood, y, mu, c):
    if not isinstance(likelihood, AwgnLikelihood) or likelihood.v <= 0:
        raise NumericError("reference implementation needs a Gaussian likelihood",
                           stage="vamp")
    v = 1.0 / (1.0 / c + 1.0 / likelihood.v)
    return v * (mu / c + y / likelihood.v), v


def _cavity(mu_hat, c_hat, mu_in, c_in, lo, hi):
    c_hat = np.maximum(c_hat, lo)
    with np.errstate(divide="ignore"):
        prec = 1.0 / c_hat - 1.0 / c_in
        c = 1.0 / prec
    c = np.where(prec <= 0.0, hi, c)
    c = np.clip(c, lo, hi)
    mu = c * (mu_hat / c_hat - mu_in / c_in)
    return mu, c


def run_vamp(instance, prior, likelihood, iters=30, regime=Regime.MMSE,
             clamp_min=1e-11, clamp_max=1e8, x_true=None,
             record_messages=False):
    """Single-level loop; same init and clamp conventions as the engine.

    Returns (x_hat, mse_trace, trace) with ``trace`` populated when
    ``record_messages`` is set.
    """
    H, y = instance.H, instance.y
    m, n = H.shape
    var_q = prior.variance()
    z_scale = float(np.mean(instance.lambda_samples)) / instance.alpha

    mu_x_p = np.zeros(n)
    c_x_p = np.full(n, var_q)
    mu_z_p = np.zeros(m)
    c_z_p = np.full(m, var_q * z_scale)

    trace = VampTrace([], [], [], [], []) if record_messages else None
    mse_trace = []
    x_hat = None
    eye = np.eye(n)
    for _ in range(iters):
        mz_hat, cz_hat = _denoise_likelihood(likelihood, y, mu_z_p, c_z_p)
        mu_z_m, c_z_m = _cavity(mz_hat, cz_hat, mu_z_p, c_z_p, clamp_min, clamp_max)

        A = H.T @ (H / c_z_m[:, None])
        A[np.diag_indices_from(A)] += 1.0 / c_x_p
        cf = cho_factor(A, lower=True, check_finite=False)
        cov = cho_solve(cf, eye, check_finite=False)
        mx_hat = cov @ (mu_x_p / c_x_p + H.T @ (mu_z_m / c_z_m))
        cx_hat = np.diag(cov)
        mu_x_m, c_x_m = _cavity(mx_hat, cx_hat, mu_x_p, c_x_p, clamp_min, clamp_max)

        x_hat, vx_hat = _denoise_prior(prior, mu_x_m, c_x_m, regime)
        mu_x_p, c_x_p = _cavity(x_hat, vx_hat, mu_x_m, c_x_m, clamp_min, clamp_max)

        A = H.T @ (H / c_z_m[:, None])
        A[np.diag_indices_from(A)] += 1.0 / c_x_p
        cf = cho_factor(A, lower=True, check_finite=False)
        cov = cho_solve(cf, eye, check_finite=False)
        mx_tilde = cov @ (mu_x_p / c_x_p + H.T @ (mu_z_m / c_z_m))
        mz_proj = H @ mx_tilde
        cz_proj = np.einsum("ij,jk,ik->i", H, cov, H, optimize=True)
        mu_z_p, c_z_p = _cavity(mz_proj, cz_proj, mu_z_m, c_z_m, clamp_min, clamp_max)

        if x_true is not None:
            diff = x_hat - x_true
            mse_trace.append(float(diff @ diff / (x_true @ x_true)))
        if record_messages:
            trace.mu_x_plus.append(mu_x_p.copy())
            trace.c_x_plus.append(c_x_p.copy())
            trace.mu_z_plus.append(mu_z_p.copy())
            trace.c_z_plus.append(c_z_p.copy())
            trace.x_hat.append(x_hat.copy())

    return x_hat, mse_trace, trace
