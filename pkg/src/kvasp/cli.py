"""Command-line driver.

Subcommands:
  run     full experiment from a JSON config file (flags override fields)
  se      state evolution only
  sweep   vary one parameter (rho | c | vF | L1 | K) over a grid
  oracle  brute-force posterior comparison at small N

Exit codes: 0 success, 2 configuration error, 3 numeric failure in every
trial.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .channels import (
    AwgnLikelihood,
    BpskPrior,
    ModelChannels,
    Regime,
    RelaxedBpskPrior,
    RsbLadder,
)
from .ensembles import EnsembleConfig
from .errors import NumericError, ParameterError
from .harness import (
    ExperimentConfig,
    channel_from_dict,
    config_to_dict,
    export,
    generate_instance,
    run_experiment,
)

_DEFAULTS = {
    "n": 400,
    "alpha": 2.0,
    "rho": 0.0,
    "c": 0.01,
    "v_true": 0.1,
    "v_post": 0.1,
    "ladder": [4.0],
    "regime": "map",
    "iters": 30,
    "trials": 50,
    "init_spread": 0.5,
    "algorithms": ["kvasp", "vamp", "bayes_vamp", "se"],
    "quad_order": 40,
    "damping": None,
    "pooled_spectrum": False,
}


def _load_settings(args) -> dict:
    settings = dict(_DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(_DEFAULTS) - {
            "seed", "true_prior", "postulated_prior",
            "true_likelihood", "postulated_likelihood"}
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        settings.update(loaded)
    for key in ("n", "alpha", "rho", "c", "v_true", "v_post", "iters",
                "trials", "init_spread", "quad_order", "damping", "regime"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            settings[key] = val
    if getattr(args, "ladder", None):
        settings["ladder"] = [float(v) for v in args.ladder.split(",")]
    if getattr(args, "algorithms", None):
        settings["algorithms"] = args.algorithms.split(",")
    if getattr(args, "seed", None) is not None:
        settings["seed"] = args.seed
    if getattr(args, "pooled_spectrum", False):
        settings["pooled_spectrum"] = True
    return settings


def _build_config(settings: dict) -> ExperimentConfig:
    if "seed" not in settings:
        raise ParameterError("--seed is required")
    regime = Regime(settings["regime"])
    ladder = RsbLadder(L=tuple(settings["ladder"]), regime=regime)
    if "true_prior" in settings:
        true_prior = channel_from_dict(settings["true_prior"])
    else:
        true_prior = RelaxedBpskPrior(c=float(settings["c"]))
    post_prior = (channel_from_dict(settings["postulated_prior"])
                  if "postulated_prior" in settings else BpskPrior())
    true_lik = (channel_from_dict(settings["true_likelihood"])
                if "true_likelihood" in settings
                else AwgnLikelihood(v=float(settings["v_true"])))
    post_lik = (channel_from_dict(settings["postulated_likelihood"])
                if "postulated_likelihood" in settings
                else AwgnLikelihood(v=float(settings["v_post"])))
    channels = ModelChannels(true_prior=true_prior, true_likelihood=true_lik,
                             post_prior=post_prior, post_likelihood=post_lik)
    ens = EnsembleConfig(n=int(settings["n"]), alpha=float(settings["alpha"]),
                         rho=float(settings["rho"]), seed=int(settings["seed"]))
    return ExperimentConfig(
        ensemble=ens, ladder=ladder, channels=channels,
        iters=int(settings["iters"]), trials=int(settings["trials"]),
        algorithms=tuple(settings["algorithms"]), seed=int(settings["seed"]),
        init_spread=float(settings["init_spread"]),
        damping=None if settings["damping"] is None else float(settings["damping"]),
        quad_order=int(settings["quad_order"]),
        pooled_spectrum=bool(settings["pooled_spectrum"]),
    )


def _add_common(p: argparse.ArgumentParser, seed_required: bool):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--n", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--c", type=float, help="true-prior relaxation variance")
    p.add_argument("--v-true", type=float, dest="v_true")
    p.add_argument("--v-post", type=float, dest="v_post")
    p.add_argument("--ladder", help="comma-separated breaking sizes, e.g. 4 or 2,4")
    p.add_argument("--regime", choices=["map", "mmse"])
    p.add_argument("--iters", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--init-spread", type=float, dest="init_spread")
    p.add_argument("--damping", type=float)
    p.add_argument("--quad-order", type=int, dest="quad_order")
    p.add_argument("--algorithms", help="comma-separated subset of "
                                        "kvasp,vamp,bayes_vamp,se,brute_force")
    p.add_argument("--pooled-spectrum", action="store_true", dest="pooled_spectrum")
    p.add_argument("--workers", type=int, default=1)


def _cmd_run(args) -> int:
    config = _build_config(_load_settings(args))
    records, summary = run_experiment(config, max_workers=args.workers)
    requested = [a for a in config.algorithms if a != "se"]
    if requested and all(not r.final for r in records):
        print("error: every trial failed numerically", file=sys.stderr)
        return 3
    csv_path, json_path = export(records, summary, args.out)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_se(args) -> int:
    settings = _load_settings(args)
    settings.setdefault("seed", 0)
    settings["algorithms"] = ["se"]
    settings["trials"] = 1
    config = _build_config(settings)
    records, summary = run_experiment(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace = summary["algorithms"]["se"]["mean"]
    payload = {"config": config_to_dict(config), "mse": trace}
    (out / "se.json").write_text(json.dumps(payload, indent=2, sort_keys=True)
                                 + "\n", encoding="utf-8")
    for i, v in enumerate(trace, start=1):
        print(f"iter {i:3d}  mse {v:.6e}")
    return 0


_SWEEP_KEYS = {"rho": "rho", "c": "c", "vF": "v_post", "L1": "ladder", "K": "ladder"}


def _cmd_sweep(args) -> int:
    settings = _load_settings(args)
    if args.param not in _SWEEP_KEYS:
        raise ParameterError(f"sweep parameter must be one of {sorted(_SWEEP_KEYS)}")
    values = [float(v) for v in args.values.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["param,value,algorithm,final_mse,stderr"]
    for value in values:
        s = dict(settings)
        if args.param == "L1":
            s["ladder"] = [value]
        elif args.param == "K":
            k = int(value)
            # doubling ladder of depth k, topping out at 4
            s["ladder"] = [float(2 ** (k - i)) for i in range(k)][::-1] if k else []
        else:
            s[_SWEEP_KEYS[args.param]] = value
        config = _build_config(s)
        _, summary = run_experiment(config, max_workers=args.workers)
        for algo, entry in sorted(summary["algorithms"].items()):
            if entry["mean"]:
                lines.append(f"{args.param},{value!r},{algo},"
                             f"{entry['mean'][-1]!r},{entry['stderr'][-1]!r}")
        print(f"{args.param}={value}: done")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def _cmd_oracle(args) -> int:
    settings = _load_settings(args)
    settings.setdefault("seed", 0)
    settings["n"] = args.n if args.n is not None else 12
    if settings["n"] > 14:
        raise ParameterError("oracle is limited to N <= 14")
    settings["algorithms"] = ["kvasp", "brute_force"]
    config = _build_config(settings)
    records, summary = run_experiment(config)
    for algo, entry in sorted(summary["algorithms"].items()):
        if entry["mean"]:
            print(f"{algo:12s} final mse {entry['mean'][-1]:.6e} "
                  f"+- {entry['stderr'][-1]:.2e} ({entry['trials']} trials)")
    export(records, summary, args.out)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kvasp",
                                     description="survey-propagation detection benchmark")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="full experiment")
    _add_common(p_run, seed_required=True)
    p_run.set_defaults(func=_cmd_run)
    p_se = sub.add_parser("se", help="state evolution only")
    _add_common(p_se, seed_required=False)
    p_se.set_defaults(func=_cmd_se)
    p_sweep = sub.add_parser("sweep", help="vary one parameter over a grid")
    _add_common(p_sweep, seed_required=True)
    p_sweep.add_argument("--param", required=True,
                         choices=sorted(_SWEEP_KEYS))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated grid values")
    p_sweep.set_defaults(func=_cmd_sweep)
    p_oracle = sub.add_parser("oracle", help="brute-force check at small N")
    _add_common(p_oracle, seed_required=False)
    p_oracle.set_defaults(func=_cmd_oracle)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
