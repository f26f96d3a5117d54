"""Experiment driver: seeded trials, baselines, oracles, and persistence.

A run draws per-trial problem instances from independent counter-based
substreams, executes the requested algorithms, and aggregates per-iteration
MSE into a CSV of rows plus a JSON summary. State evolution is computed
once per configuration on the first trial's empirical spectrum (or on the
pooled spectrum). The brute-force posterior oracle enumerates sign patterns
and is the exact reference at desk scale.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import __version__
from .channels import (
    AwgnLikelihood,
    BpskPrior,
    GaussianPrior,
    ModelChannels,
    Regime,
    RelaxedBpskPrior,
    RsbLadder,
)
from .engine import KvaspConfig, mse, run
from .ensembles import EnsembleConfig, ProblemInstance, build_measurement, philox_stream
from .errors import NumericError, ParameterError, UnsupportedError
from .quadrature import QuadratureConfig
from .state_evolution import SeConfig, se_run
from .vamp import run_vamp

KNOWN_ALGORITHMS = ("kvasp", "vamp", "bayes_vamp", "se", "brute_force")
_BRUTE_FORCE_MAX_N = 14


@dataclass(frozen=True)
class ExperimentConfig:
    ensemble: EnsembleConfig
    ladder: RsbLadder
    channels: ModelChannels
    iters: int = 30
    trials: int = 50
    algorithms: tuple = ("kvasp", "vamp", "se")
    seed: int = 0
    init_spread: float = 0.5
    damping: float | None = None      # None: 1.0, or 0.7 once rho >= 0.4
    clamp_min: float = 1e-11
    clamp_max: float = 1e8
    quad_order: int = 40
    pooled_spectrum: bool = False
    vamp_regime: Regime = Regime.MMSE  # single-level baseline stays soft

    def __post_init__(self):
        if self.trials < 1:
            raise ParameterError(f"trials must be >= 1, got {self.trials}")
        unknown = set(self.algorithms) - set(KNOWN_ALGORITHMS)
        if unknown:
            raise ParameterError(f"unknown algorithms: {sorted(unknown)}")
        if not self.algorithms:
            raise ParameterError("no algorithms requested")
        if "brute_force" in self.algorithms and self.ensemble.n > _BRUTE_FORCE_MAX_N:
            raise ParameterError(
                f"brute_force is limited to N <= {_BRUTE_FORCE_MAX_N}")

    @property
    def effective_damping(self) -> float:
        if self.damping is not None:
            return self.damping
        return 0.7 if self.ensemble.rho >= 0.4 else 1.0


@dataclass
class TrialRecord:
    trial: int
    seed: int
    traces: dict            # algorithm -> list of per-iteration MSE
    final: dict             # algorithm -> final MSE
    clamps: dict            # algorithm -> clamp count
    wall_time: float
    error: str | None = None


def generate_instance(config: ExperimentConfig, trial: int) -> ProblemInstance:
    """Instance from substream (seed, trial): matrix, truth, noise, in order."""
    rng = philox_stream(config.seed, trial)
    H, lam = build_measurement(config.ensemble, rng=rng)
    x0 = config.channels.true_prior.sample(rng, config.ensemble.n)
    z0 = H @ x0
    w = config.channels.true_likelihood.sample_noise(rng, config.ensemble.m)
    return ProblemInstance(H=H, x0=x0, z0=z0, y=z0 + w, lambda_samples=lam)


def brute_force_posterior(instance: ProblemInstance, prior: BpskPrior,
                          likelihood: AwgnLikelihood, regime: Regime) -> np.ndarray:
    """Exact postulated-posterior estimate by enumerating all sign patterns.

    Mean of the postulated posterior in the MMSE regime, maximizing
    configuration in the MAP regime. Requires a two-atom prior and
    N <= 14.
    """
    n = instance.n
    if n > _BRUTE_FORCE_MAX_N:
        raise UnsupportedError(f"brute force limited to N <= {_BRUTE_FORCE_MAX_N}")
    if not isinstance(prior, BpskPrior):
        raise UnsupportedError("brute force needs a finite-support prior")
    if likelihood.v <= 0:
        raise ParameterError("postulated noise variance must be positive")
    bits = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
    patterns = prior.a * (2.0 * bits - 1.0)
    resid = instance.y[None, :] - patterns @ instance.H.T
    loglik = -0.5 * np.einsum("ij,ij->i", resid, resid) / likelihood.v
    if regime == Regime.MAP:
        return patterns[int(np.argmax(loglik))]
    w = np.exp(loglik - logsumexp(loglik))
    return w @ patterns


def _kvasp_config(config: ExperimentConfig) -> KvaspConfig:
    return KvaspConfig(
        ladder=config.ladder,
        iters=config.iters,
        damping=config.effective_damping,
        clamp_min=config.clamp_min,
        clamp_max=config.clamp_max,
        init_spread=config.init_spread,
        quad=QuadratureConfig(order=config.quad_order),
    )


def _run_trial(config: ExperimentConfig, trial: int) -> TrialRecord:
    start = time.perf_counter()
    instance = generate_instance(config, trial)
    ch = config.channels
    traces, final, clamps = {}, {}, {}
    error = None
    for algo in config.algorithms:
        if algo == "se":
            continue
        try:
            if algo == "kvasp":
                rep = run(instance, ch.post_prior, ch.post_likelihood,
                          _kvasp_config(config), x_true=instance.x0)
                traces[algo] = rep.mse_trace
                clamps[algo] = rep.clamp_count
            elif algo == "vamp":
                _, trace, _ = run_vamp(
                    instance, ch.post_prior, ch.post_likelihood,
                    iters=config.iters, regime=config.vamp_regime,
                    clamp_min=config.clamp_min, clamp_max=config.clamp_max,
                    x_true=instance.x0)
                traces[algo] = trace
            elif algo == "bayes_vamp":
                _, trace, _ = run_vamp(
                    instance, ch.true_prior, ch.true_likelihood,
                    iters=config.iters, regime=config.ladder.regime,
                    clamp_min=config.clamp_min, clamp_max=config.clamp_max,
                    x_true=instance.x0)
                traces[algo] = trace
            elif algo == "brute_force":
                x_star = brute_force_posterior(
                    instance, ch.post_prior, ch.post_likelihood,
                    config.ladder.regime)
                traces[algo] = [mse(x_star, instance.x0)]
            final[algo] = traces[algo][-1]
        except NumericError as exc:
            error = f"{algo}: {exc}"
    return TrialRecord(trial=trial, seed=config.seed, traces=traces,
                       final=final, clamps=clamps,
                       wall_time=time.perf_counter() - start, error=error)


def _se_trace(config: ExperimentConfig) -> list:
    if config.pooled_spectrum:
        spectra = [generate_instance(config, t).lambda_samples
                   for t in range(config.trials)]
        spectrum = np.concatenate(spectra)
    else:
        spectrum = generate_instance(config, 0).lambda_samples
    se_cfg = SeConfig(
        ladder=config.ladder,
        iters=config.iters,
        init_spread=config.init_spread,
        clamp_min=config.clamp_min,
        clamp_max=config.clamp_max,
        quad=QuadratureConfig(order=config.quad_order),
    )
    result = se_run(spectrum, config.ensemble.alpha, config.channels, se_cfg)
    return result.mse_trace


def _padded(trace, length):
    if len(trace) >= length:
        return list(trace[:length])
    if not trace:
        return [math.nan] * length
    return list(trace) + [trace[-1]] * (length - len(trace))


def run_experiment(config: ExperimentConfig, max_workers: int = 1):
    """Execute all trials (optionally in a process pool) and aggregate.

    Returns (records, summary). Trial records are always ordered by trial
    index, so results are identical at any parallelism level. Per-trial
    numeric failures are recorded, not fatal; if every trial of an
    algorithm failed the summary marks it and the caller decides.
    """
    if max_workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            records = list(pool.map(_run_trial, [config] * config.trials,
                                    range(config.trials)))
    else:
        records = [_run_trial(config, t) for t in range(config.trials)]
    records.sort(key=lambda r: r.trial)

    summary = {
        "config": config_to_dict(config),
        "versions": {"kvasp": __version__, "numpy": np.__version__},
        "algorithms": {},
        "failures": [r.error for r in records if r.error],
    }
    for algo in config.algorithms:
        if algo == "se":
            trace = _se_trace(config)
            summary["algorithms"]["se"] = {
                "mean": trace, "stderr": [0.0] * len(trace), "trials": 0}
            continue
        rows = [r.traces[algo] for r in records if algo in r.traces]
        if not rows:
            summary["algorithms"][algo] = {"mean": [], "stderr": [], "trials": 0}
            continue
        length = max(len(t) for t in rows)
        mat = np.array([_padded(t, length) for t in rows])
        mean = mat.mean(axis=0)
        if mat.shape[0] > 1:
            stderr = mat.std(axis=0, ddof=1) / math.sqrt(mat.shape[0])
        else:
            stderr = np.zeros(length)
        summary["algorithms"][algo] = {
            "mean": mean.tolist(),
            "stderr": stderr.tolist(),
            "trials": int(mat.shape[0]),
            "clamps": int(sum(r.clamps.get(algo, 0) for r in records)),
        }
    return records, summary


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def config_to_dict(config: ExperimentConfig) -> dict:
    ch = config.channels
    return {
        "n": config.ensemble.n,
        "alpha": config.ensemble.alpha,
        "rho": config.ensemble.rho,
        "seed": config.seed,
        "iters": config.iters,
        "trials": config.trials,
        "algorithms": list(config.algorithms),
        "ladder": list(config.ladder.L),
        "regime": config.ladder.regime.value,
        "init_spread": config.init_spread,
        "damping": config.effective_damping,
        "clamp_min": config.clamp_min,
        "clamp_max": config.clamp_max,
        "quad_order": config.quad_order,
        "pooled_spectrum": config.pooled_spectrum,
        "true_prior": _channel_to_dict(ch.true_prior),
        "postulated_prior": _channel_to_dict(ch.post_prior),
        "true_likelihood": _channel_to_dict(ch.true_likelihood),
        "postulated_likelihood": _channel_to_dict(ch.post_likelihood),
    }


def _channel_to_dict(channel) -> dict:
    if isinstance(channel, AwgnLikelihood):
        return {"kind": "awgn", "v": channel.v}
    if isinstance(channel, BpskPrior):
        return {"kind": "bpsk", "a": channel.a}
    if isinstance(channel, RelaxedBpskPrior):
        return {"kind": "relaxed_bpsk", "c": channel.c}
    if isinstance(channel, GaussianPrior):
        return {"kind": "gaussian", "mean": channel.mean, "var": channel.var}
    raise ParameterError(f"cannot serialize channel {channel!r}")


def channel_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "awgn":
        return AwgnLikelihood(v=float(d["v"]))
    if kind == "bpsk":
        return BpskPrior(a=float(d.get("a", 1.0)))
    if kind == "relaxed_bpsk":
        return RelaxedBpskPrior(c=float(d["c"]))
    if kind == "gaussian":
        return GaussianPrior(mean=float(d.get("mean", 0.0)), var=float(d["var"]))
    raise ParameterError(f"unknown channel kind {kind!r}")


def export(records, summary, out_dir) -> tuple:
    """Write results.csv and summary.json; deterministic bytes.

    CSV rows are (trial, algorithm, iteration, mse) sorted by that tuple;
    the state-evolution trace, being configuration-level, is stored under
    trial -1. Floats use shortest round-trip formatting, newlines are LF.
    """
    if not records:
        raise ParameterError("nothing to export")
    from pathlib import Path
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    se_entry = summary["algorithms"].get("se")
    if se_entry:
        for i, v in enumerate(se_entry["mean"], start=1):
            rows.append((-1, "se", i, v))
    for rec in records:
        for algo in sorted(rec.traces):
            for i, v in enumerate(rec.traces[algo], start=1):
                rows.append((rec.trial, algo, i, v))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))

    csv_path = out_dir / "results.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["trial", "algorithm", "iteration", "mse"])
    for trial, algo, it, v in rows:
        writer.writerow([trial, algo, it, repr(float(v))])
    csv_path.write_bytes(buf.getvalue().encode("utf-8"))

    json_path = out_dir / "summary.json"
    payload = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    json_path.write_bytes(payload.encode("utf-8"))
    return csv_path, json_path
