"""The vector survey-propagation engine.

One sweep alternates four stages: denoise the transform-side messages
against the likelihood, combine cavities, solve the per-level regularized
normal equations to move information across the measurement matrix, denoise
against the prior, and project back to the transform side. Every message is
a per-coordinate mean plus a per-coordinate cumulative variance ladder with
K+1 levels; K = 0 reduces the sweep to plain vector message passing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .channels import RsbLadder, ladder_to_levels, levels_to_ladder
from .ensembles import ProblemInstance
from .errors import NumericError, ParameterError
from .quadrature import QuadratureConfig, posterior_moments


@dataclass(frozen=True)
class KvaspConfig:
    ladder: RsbLadder
    iters: int = 30
    damping: float = 1.0
    clamp_min: float = 1e-11
    clamp_max: float = 1e8
    init_spread: float = 0.5
    v_floor: float = 1e-14     # level-variance floor fed to the denoisers
    tol: float = 1e-10         # early stop on relative change of x_hat
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)

    def __post_init__(self):
        if self.iters < 1:
            raise ParameterError(f"iters must be >= 1, got {self.iters}")
        if not 0.0 < self.damping <= 1.0:
            raise ParameterError(f"damping must lie in (0, 1], got {self.damping}")
        if not 0.0 < self.clamp_min < self.clamp_max:
            raise ParameterError("need 0 < clamp_min < clamp_max")
        if self.init_spread < 0.0:
            raise ParameterError("init_spread must be >= 0")


@dataclass
class KvaspState:
    """All four directional messages plus run diagnostics."""

    mu_x_plus: np.ndarray
    c_x_plus: np.ndarray       # (K+1, N)
    mu_z_plus: np.ndarray
    c_z_plus: np.ndarray       # (K+1, M)
    mu_x_minus: np.ndarray | None = None
    c_x_minus: np.ndarray | None = None
    mu_z_minus: np.ndarray | None = None
    c_z_minus: np.ndarray | None = None
    x_hat: np.ndarray | None = None        # prior-denoiser output mean
    v_hat_x: np.ndarray | None = None      # prior-denoiser output levels
    iteration: int = 0
    clamp_count: int = 0


@dataclass
class EstimateReport:
    x_hat: np.ndarray
    v_hat: np.ndarray          # (K+1, N) hatted level variances
    mse_trace: list
    residuals: list            # relative x_hat change per sweep
    iterations: int
    clamp_count: int


def init_state(instance: ProblemInstance, prior, config: KvaspConfig) -> KvaspState:
    """Zero-mean start; ladders sized by the prior variance and the spectrum.

    Level k of the input-side ladder is Var_q[x] (1 + k * init_spread); the
    transform side is scaled by mean(lambda) / alpha so both sides carry the
    same per-level signal energy. A positive spread is what activates the
    survey structure: with equal levels the sweep stays on the single-level
    manifold.
    """
    K = config.ladder.K
    n, m = instance.n, instance.m
    var_q = prior.variance()
    spread = 1.0 + config.init_spread * np.arange(K + 1)
    c_x = np.repeat((var_q * spread)[:, None], n, axis=1)
    z_scale = float(np.mean(instance.lambda_samples)) / instance.alpha
    c_z = np.repeat((var_q * spread * z_scale)[:, None], m, axis=1)
    return KvaspState(
        mu_x_plus=np.zeros(n), c_x_plus=c_x,
        mu_z_plus=np.zeros(m), c_z_plus=c_z,
    )


def cavity_combine(c_hat, c_in, mu_hat, mu_in, clamp_min, clamp_max):
    """Precision-difference message extraction with clamping.

    Returns (c_out, mu_out, n_clamped). Nonpositive precision differences
    are clamped to clamp_max, results are clipped into [clamp_min,
    clamp_max], and each per-coordinate ladder is forced nondecreasing; all
    three adjustments are counted.
    """
    c_hat = np.asarray(c_hat, dtype=float)
    c_in = np.asarray(c_in, dtype=float)
    count = 0
    floored = np.maximum(c_hat, clamp_min)
    count += int(np.sum(floored != c_hat))
    c_hat = floored
    with np.errstate(divide="ignore"):
        prec = 1.0 / c_hat - 1.0 / c_in
        c_out = 1.0 / prec
    neg = prec <= 0.0
    count += int(np.sum(neg))
    c_out = np.where(neg, clamp_max, c_out)
    clipped = np.clip(c_out, clamp_min, clamp_max)
    count += int(np.sum(clipped != c_out))
    c_out = clipped
    mono = np.maximum.accumulate(c_out, axis=0)
    count += int(np.sum(mono != c_out))
    c_out = mono
    mu_out = c_out[-1] * (mu_hat / c_hat[-1] - mu_in / c_in[-1])
    return c_out, mu_out, count


def _damp(mu_new, c_new, mu_old, c_old, damping):
    if damping >= 1.0 or mu_old is None:
        return mu_new, c_new
    c = 1.0 / (damping / c_new + (1.0 - damping) / c_old)
    mu = damping * mu_new + (1.0 - damping) * mu_old
    return mu, c


@dataclass
class LmmseResult:
    mu_x: np.ndarray
    c_x: np.ndarray                    # (K+1, N) diagonals
    mu_z: np.ndarray | None = None
    c_z: np.ndarray | None = None      # (K+1, M) diagonals


def lmmse_stage(H: np.ndarray, c_x, c_z, mu_x, mu_z,
                project_z: bool = False, stage: str = "lmmse") -> LmmseResult:
    """Per-level solve of [Diag(1/c_x,k) + H^T Diag(1/c_z,k) H]^;-1;.

    The mean uses only the top level; lower levels contribute their inverse
    diagonals. With ``project_z`` the per-level covariances and the mean are
    pushed through H for the transform side.
    """
    m, n = H.shape
    c_x = np.asarray(c_x, dtype=float)
    c_z = np.asarray(c_z, dtype=float)
    kp1 = c_x.shape[0]
    rhs = mu_x / c_x[-1] + H.T @ (mu_z / c_z[-1])
    out = LmmseResult(mu_x=np.empty(n), c_x=np.empty((kp1, n)))
    if project_z:
        out.c_z = np.empty((kp1, m))
    for k in range(kp1):
        A = H.T @ (H * (1.0 / c_z[k])[:, None])
        A[np.diag_indices_from(A)] += 1.0 / c_x[k]
        try:
            cf = cho_factor(A, lower=True, check_finite=False)
            cov = cho_solve(cf, np.eye(n), check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"level-{k} solve failed: {exc}", stage=stage) from exc
        out.c_x[k] = np.diag(cov)
        if project_z:
            out.c_z[k] = np.einsum("ij,jk,ik->i", H, cov, H, optimize=True)
        if k == kp1 - 1:
            out.mu_x = cov @ rhs
            if project_z:
                out.mu_z = H @ out.mu_x
    return out


def _effective_ladder(c_ladder, ladder, v_floor):
    """Ladder actually presented to a denoiser: level variances floored.

    The cavity step must subtract this ladder, not the raw one, or a nearly
    flat ladder (levels below the floor) yields spurious precision
    differences.
    """
    levels = np.maximum(ladder_to_levels(c_ladder, ladder), v_floor)
    return levels, levels_to_ladder(levels, ladder)


def _denoise(channel, y, mu, levels, ladder, quad, stage):
    try:
        return posterior_moments(channel, y, mu, levels, ladder, quad)
    except NumericError as exc:
        raise NumericError(str(exc), stage=stage) from exc


def iterate(state: KvaspState, instance: ProblemInstance, prior, likelihood,
            config: KvaspConfig) -> KvaspState:
    """One full sweep: z-denoise, x extraction, prior denoise, z projection."""
    ladder = config.ladder
    c_lo, c_hi = config.clamp_min, config.clamp_max
    d = config.damping
    clamps = state.clamp_count

    # backward half-sweep: likelihood side
    lv_z, c_z_in = _effective_ladder(state.c_z_plus, ladder, config.v_floor)
    out_z = _denoise(likelihood, instance.y, state.mu_z_plus, lv_z,
                     ladder, config.quad, "z-denoise")
    c_z_m, mu_z_m, nc = cavity_combine(out_z.c_hat, c_z_in,
                                       out_z.mean, state.mu_z_plus, c_lo, c_hi)
    clamps += nc
    mu_z_m, c_z_m = _damp(mu_z_m, c_z_m, state.mu_z_minus, state.c_z_minus, d)

    ext = lmmse_stage(instance.H, state.c_x_plus, c_z_m,
                      state.mu_x_plus, mu_z_m, stage="x-lmmse")
    c_x_m, mu_x_m, nc = cavity_combine(ext.c_x, state.c_x_plus,
                                       ext.mu_x, state.mu_x_plus, c_lo, c_hi)
    clamps += nc
    mu_x_m, c_x_m = _damp(mu_x_m, c_x_m, state.mu_x_minus, state.c_x_minus, d)

    # forward half-sweep: prior side
    lv_x, c_x_in = _effective_ladder(c_x_m, ladder, config.v_floor)
    out_x = _denoise(prior, None, mu_x_m, lv_x,
                     ladder, config.quad, "x-denoise")
    c_x_p, mu_x_p, nc = cavity_combine(out_x.c_hat, c_x_in,
                                       out_x.mean, mu_x_m, c_lo, c_hi)
    clamps += nc
    mu_x_p, c_x_p = _damp(mu_x_p, c_x_p, state.mu_x_plus, state.c_x_plus, d)

    proj = lmmse_stage(instance.H, c_x_p, c_z_m, mu_x_p, mu_z_m,
                       project_z=True, stage="z-lmmse")
    c_z_p, mu_z_p, nc = cavity_combine(proj.c_z, c_z_m,
                                       proj.mu_z, mu_z_m, c_lo, c_hi)
    clamps += nc
    mu_z_p, c_z_p = _damp(mu_z_p, c_z_p, state.mu_z_plus, state.c_z_plus, d)

    return KvaspState(
        mu_x_plus=mu_x_p, c_x_plus=c_x_p,
        mu_z_plus=mu_z_p, c_z_plus=c_z_p,
        mu_x_minus=mu_x_m, c_x_minus=c_x_m,
        mu_z_minus=mu_z_m, c_z_minus=c_z_m,
        x_hat=np.asarray(out_x.mean),
        v_hat_x=ladder_to_levels(out_x.c_hat, ladder),
        iteration=state.iteration + 1,
        clamp_count=clamps,
    )


def mse(x_hat, x0) -> float:
    """Normalized squared error ||x_hat - x0||^2 / ||x0||^2."""
    x_hat = np.asarray(x_hat, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_hat.shape != x0.shape:
        raise ParameterError("mse needs equal-length vectors")
    denom = float(np.dot(x0, x0))
    if denom == 0.0:
        raise ZeroDivisionError("mse undefined for a zero truth vector")
    return float(np.dot(x_hat - x0, x_hat - x0) / denom)


def run(instance: ProblemInstance, prior, likelihood, config: KvaspConfig,
        x_true: np.ndarray | None = None) -> EstimateReport:
    """Run the sweep for up to ``config.iters`` iterations.

    Stops early once the relative change of the estimate drops below
    ``config.tol``. The MSE trace is recorded against ``x_true`` when given,
    one entry per executed sweep.
    """
    state = init_state(instance, prior, config)
    trace = []
    residuals = []
    prev = None
    for _ in range(config.iters):
        state = iterate(state, instance, prior, likelihood, config)
        if x_true is not None:
            trace.append(mse(state.x_hat, x_true))
        if prev is not None:
            num = float(np.linalg.norm(state.x_hat - prev))
            den = float(np.linalg.norm(state.x_hat)) or 1.0
            residuals.append(num / den)
            if residuals[-1] < config.tol:
                break
        prev = state.x_hat.copy()
    return EstimateReport(
        x_hat=state.x_hat,
        v_hat=state.v_hat_x,
        mse_trace=trace,
        residuals=residuals,
        iterations=state.iteration,
        clamp_count=state.clamp_count,
    )
