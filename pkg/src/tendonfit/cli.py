"""Command-line driver for the two-stage pipeline.

Typical run::

    tendonfit synth --out data/ --population 6 --seed 1
    tendonfit select data/*.csv --out sel/
    tendonfit trim data/*.csv --selection sel/ --out trimmed/
    tendonfit fit-pop trimmed/*.csv --out pop/
    tendonfit predict --posterior pop/ --out pred/ --data trimmed/*.csv --selection sel/

Settings can come from an INI file passed with ``--config``. Keys are option
names with dashes or underscores, read from ``[DEFAULT]`` and from a section
named after the subcommand; command-line flags take precedence.

Exit codes: 0 success, 1 usage error, 2 data error, 3 sampler did not converge
(outputs are still written).
"""

from __future__ import annotations

import argparse
import configparser
import glob
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .constitutive import PARAM_NAMES, THETA_NAMES, DomainError, ModelParams, xi_to_theta
from .dataio import (DataError, Population, clip_to_max_stress, load_chain, load_experiment,
                     resolve_sigma_obs, save_chain, save_experiment, truncate, write_json, write_table,
                     SIGMA_OBS_QUOTED)
from .fidelity import SelectionConfig, estimate_sigma, run_selection
from .mixed import (PopulationConfig, fit_population, kde_grid, linear_modulus_comparison,
                    posterior_from_draws, posterior_predictive_params, posterior_predictive_stress,
                    predictive_modes)
from .samplers import summarize
from .synth import PopulationSpec, SyntheticSpec, generate_experiment, generate_population

log = logging.getLogger("tendonfit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ---------------------------------------------------------------------

def _expand(paths) -> list:
    out = []
    for p in paths:
        hits = sorted(glob.glob(p))
        out.extend(hits if hits else [p])
    return [Path(p) for p in out]


def _sigma(args) -> float:
    value = SIGMA_OBS_QUOTED if args.sigma_obs is None else args.sigma_obs
    return resolve_sigma_obs(value, args.sigma_interpretation)


def _resolved(args) -> dict:
    skip = {"func", "config"}
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        out[k] = [str(x) for x in v] if isinstance(v, list) else (str(v) if isinstance(v, Path) else v)
    out["version"] = __version__
    return out


def _sidecar(path: Path, args, extra=None):
    meta = {"config": _resolved(args), "seed": getattr(args, "seed", None)}
    if extra:
        meta.update(extra)
    write_json(path.with_suffix(".json"), meta, force=True)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args) -> int:
    return args.workers if args.workers else (os.cpu_count() or 1)


def _load(args, path) -> "Experiment":
    return load_experiment(path, percent=getattr(args, "percent", False),
                           tendon_type=getattr(args, "tendon_type", None))


# --- subcommands ---------------------------------------------------------------

def cmd_select(args) -> int:
    out = _outdir(args)
    sigma = _sigma(args)
    base = SelectionConfig.paper_scale() if args.paper_scale else SelectionConfig()
    cfg = SelectionConfig(
        n_burnin=args.burnin or base.n_burnin, n_samples=args.samples or base.n_samples,
        n_chains=args.chains or base.n_chains, seed=args.seed, thin=args.thin or base.thin,
        threshold=args.threshold, workers=_workers(args),
    )
    status = EXIT_OK
    for path in _expand(args.data):
        exp = clip_to_max_stress(_load(args, path))
        log.info("selection for %s (%d observations)", exp.id, len(exp))
        summary = run_selection(exp, sigma, cfg)
        table = out / f"{exp.id}_fidelity.csv"
        write_table(table, {"index": np.arange(len(exp)), "stretch": exp.stretch,
                            "fidelity_mean": summary.fidelity_mean}, force=args.force)
        report = summary.report()
        report["b_mean"] = float(np.mean(xi_to_theta(summary.xi_draws.reshape(-1, 4))[:, 3]))
        report["sigma_obs"] = sigma
        _sidecar(table, args, {"selection": report})
        for c in range(summary.xi_draws.shape[0]):
            save_chain(out / f"{exp.id}_xi_chain{c}.csv", summary.xi_draws[c], PARAM_NAMES,
                       {"seed": report["config"]["chain_seeds"][c], "master_seed": args.seed,
                        "block_acceptance": summary.block_acceptance[c], "divergences": 0,
                        "settings": report["config"], "thin": cfg.thin},
                       force=args.force)
        if not summary.converged:
            log.warning("%s: %s", exp.id, "; ".join(summary.warnings))
            status = EXIT_NOT_CONVERGED
        print(f"{exp.id}: truncation index {summary.truncation_index}, converged={summary.converged}")
    return status


def _read_fidelity(path: Path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, 1], rows[:, 2]


def cmd_trim(args) -> int:
    out = _outdir(args)
    sel = Path(args.selection)
    for path in _expand(args.data):
        exp = clip_to_max_stress(_load(args, path))
        fpath = sel / f"{exp.id}_fidelity.csv"
        if not fpath.exists():
            raise DataError(f"no fidelity file for {exp.id} in {sel}")
        stretch, means = _read_fidelity(fpath)
        if len(stretch) != len(exp) or not np.allclose(stretch, exp.stretch, rtol=0, atol=1e-12):
            raise DataError(f"{fpath} does not match the observations of {exp.id}")
        trimmed = truncate(exp, means, args.threshold)
        target = out / f"{exp.id}.csv"
        save_experiment(target, trimmed, force=args.force)
        _sidecar(target, args, {"truncation_index": trimmed.truncation_index,
                                "truncation_stretch": float(exp.stretch[trimmed.truncation_index - 1])})
        print(f"{exp.id}: kept {len(trimmed)} of {len(exp)} observations")
    return EXIT_OK


def _population_config(args) -> PopulationConfig:
    base = PopulationConfig.paper_scale() if args.paper_scale else PopulationConfig()
    return PopulationConfig(
        n_warmup=args.warmup or base.n_warmup, n_samples=args.samples or base.n_samples,
        n_chains=args.chains or base.n_chains, seed=args.seed, step_size=args.step_size,
        adapt_delta=args.adapt_delta, max_tree_depth=args.max_tree_depth, workers=_workers(args),
    )


def cmd_fit_pop(args) -> int:
    out = _outdir(args)
    exps = [_load(args, p) for p in _expand(args.data)]
    if not exps:
        raise DataError("no experiments given")
    untrimmed = [e.id for e in exps if e.fidelity is None]
    if untrimmed and not args.no_selection:
        raise DataError(f"experiments without selection output: {', '.join(untrimmed)} "
                        "(run select/trim first or pass --no-selection)")
    if args.no_selection:
        exps = [clip_to_max_stress(e) for e in exps]
    pop = Population(tuple(exps), sigma_obs=_sigma(args))
    cfg = _population_config(args)
    post = fit_population(pop, cfg)
    report = post.report()
    for c, chain in enumerate(post.chains):
        save_chain(out / f"population_chain{c}.csv", chain.draws, post.names,
                   {"seed": int(chain.seed), "master_seed": args.seed, "acceptance_rate": chain.acceptance_rate,
                    "divergences": int(chain.divergences), "settings": asdict(cfg),
                    "sigma_obs": pop.sigma_obs, "experiments": post.ids},
                   force=args.force)
    report["resolved"] = _resolved(args)
    write_json(out / "population_report.json", report, force=True)
    print(f"max split R-hat {report['max_rhat']}, divergences {sum(report['divergences'])}")
    if not post.converged:
        log.warning("population posterior not converged")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_posterior(directory: Path):
    files = sorted(directory.glob("population_chain*.csv"), key=lambda p: int(p.stem.split("chain")[-1]))
    if not files:
        raise DataError(f"no population chains in {directory}")
    draws, seeds, meta = [], [], None
    for f in files:
        d, names, m = load_chain(f)
        draws.append(d)
        seeds.append(m.get("seed", 0))
        meta = meta or m
    ids = meta.get("experiments") or sorted({n.split(".")[0] for n in names[:-14]})
    return posterior_from_draws(ids, draws, float(meta.get("sigma_obs", math.sqrt(SIGMA_OBS_QUOTED))), seeds)


def cmd_predict(args) -> int:
    out = _outdir(args)
    post = _load_posterior(Path(args.posterior))
    theta = posterior_predictive_params(post, args.draws, seed=args.seed)
    write_table(out / "predictive_theta.csv", {n: theta[:, k] for k, n in enumerate(THETA_NAMES)})
    _sidecar(out / "predictive_theta.csv", args)
    modes = predictive_modes(theta)
    for k, name in enumerate(THETA_NAMES):
        grid, dens = kde_grid(theta[:, k])
        write_table(out / f"predictive_density_{name}.csv", {name: grid, "density": dens})
    result = {"modes": modes, "n_draws": int(len(theta)), "converged": post.converged}

    exps = {}
    if args.data:
        exps = {e.id: e for e in (_load(args, p) for p in _expand(args.data))}
        for i, eid in enumerate(post.ids):
            if eid not in exps:
                continue
            e = exps[eid]
            lam = np.linspace(e.stretch[0], e.stretch[-1], args.grid)
            band = posterior_predictive_stress(post, i, lam, post.sigma_obs, n_draws=args.draws, seed=args.seed)
            write_table(out / f"stress_band_{eid}.csv", {k: band[k] for k in ("stretch", "median", "lower", "upper")})

    if args.selection and exps:
        sel = Path(args.selection)
        b_means, tops, used = [], [], []
        for eid, e in exps.items():
            meta_path = sel / f"{eid}_fidelity.json"
            if not meta_path.exists():
                continue
            meta = json.loads(meta_path.read_text())
            b_means.append(meta["selection"]["b_mean"])
            tops.append(float(e.stretch[-1]))
            used.append(e)
        comp = linear_modulus_comparison(used, b_means, tops)
        result["linear_modulus"] = comp.report()
        if comp.slopes:
            grid = np.linspace(0.5 * min(comp.slopes.values()), 1.5 * max(comp.slopes.values()), 512)
            write_table(out / "linear_modulus_density.csv", {"modulus": grid, "density": comp.density(grid)})

    write_json(out / "predictive_summary.json", {**result, "config": _resolved(args)})
    print(json.dumps({k: round(v, 6) for k, v in modes.items()}))
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    stretch = np.round(np.linspace(1.0, 1.0 + args.max_strain, args.points), 12)
    onset = None if args.onset is None else 1.0 + args.onset
    noise = _sigma(args) if args.noise is None else args.noise
    if args.population:
        mu = np.array(args.mu) if args.mu else np.array([1.05309738, 6.83672018, -3.80045123, -3.59771868])
        sd = np.array(args.pop_sd)
        spec = SyntheticSpec(stretch=stretch, noise_sd=noise, damage_onset=onset, softening=args.softening,
                             population=PopulationSpec(mu, np.diag(sd**2), args.population),
                             tendon_type=args.tendon_type or "SDFT", seed=args.seed)
        exps = generate_population(spec).experiments
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / f"{e.id}.csv" for e in exps]
    else:
        params = ModelParams(*args.params)
        spec = SyntheticSpec(params=params, stretch=stretch, noise_sd=noise, damage_onset=onset,
                             softening=args.softening, early_damage=True,
                             tendon_type=args.tendon_type or "SDFT", seed=args.seed)
        exps = [generate_experiment(spec, exp_id=args.id)]
        targets = [out if out.suffix == ".csv" else out / f"{args.id}.csv"]
    for e, t in zip(exps, targets):
        save_experiment(t, e, force=args.force)
        _sidecar(t, args, {"truth": e.meta})
        print(t)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    chains, names = [], None
    for path in _expand(args.chains):
        d, n, _ = load_chain(path)
        if names is not None and n != names:
            raise DataError(f"{path} has different columns from the other chains")
        names = n
        chains.append(d)
    n = min(len(c) for c in chains)
    report = summarize(np.stack([c[:n] for c in chains]), names)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        write_json(Path(args.out), report, force=True)
    print(text)
    if report["max_rhat"] is not None and report["max_rhat"] > args.rhat_threshold:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_estimate_sigma(args) -> int:
    result = {}
    for path in _expand(args.data):
        e = _load(args, path)
        result[e.id] = estimate_sigma(e, args.max_strain)
        print(f"{e.id}: {result[e.id]:.6g}")
    if args.out:
        write_json(Path(args.out), {"sigma": result, "config": _resolved(args)}, force=True)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--config", help="INI file with default settings")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--percent", action="store_true", help="strain columns are in percent")
    p.add_argument("--tendon-type", choices=["SDFT", "CDET"])
    p.add_argument("--sigma-obs", type=float, help="quoted noise level (default 0.15)")
    p.add_argument("--sigma-interpretation", choices=["variance", "sd"], default="variance",
                   help="read --sigma-obs as a variance (MPa^2) or a standard deviation")
    if seed:
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0, help="parallel chains (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tendonfit", description="Two-stage Bayesian tendon model fitting.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("select", help="stage 1: fidelity inference per experiment")
    p.add_argument("data", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--burnin", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--paper-scale", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("trim", help="truncate experiments at the fidelity threshold")
    p.add_argument("data", nargs="+")
    p.add_argument("--selection", required=True, help="directory written by select")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.3)
    _common(p)
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("fit-pop", help="stage 2: mixed-effects posterior with NUTS")
    p.add_argument("data", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--no-selection", action="store_true", help="allow experiments without fidelity weights")
    p.add_argument("--warmup", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--adapt-delta", type=float, default=0.99)
    p.add_argument("--max-tree-depth", type=int, default=14)
    p.add_argument("--paper-scale", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_fit_pop)

    p = sub.add_parser("predict", help="posterior predictives, modes, plot-ready grids")
    p.add_argument("--posterior", required=True, help="directory written by fit-pop")
    p.add_argument("--out", required=True)
    p.add_argument("--data", nargs="*", default=[], help="experiments for stress bands")
    p.add_argument("--selection", help="select output, for the linear-modulus comparison")
    p.add_argument("--draws", type=int)
    p.add_argument("--grid", type=int, default=200)
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="write synthetic experiments")
    p.add_argument("--out", required=True, help="CSV file, or directory for populations")
    p.add_argument("--id", default="synthetic")
    p.add_argument("--params", type=float, nargs=4, metavar=("NCM", "FIB", "A", "B"),
                   default=[2.8665, 931.36, 1.022352, 1.049725])
    p.add_argument("--population", type=int, default=0, help="number of experiments to draw")
    p.add_argument("--mu", type=float, nargs=4)
    p.add_argument("--pop-sd", type=float, nargs=4, default=[0.3, 0.15, 0.2, 0.2])
    p.add_argument("--noise", type=float, help="noise sd (default: resolved sigma-obs)")
    p.add_argument("--onset", type=float, help="damage onset strain")
    p.add_argument("--softening", type=float, default=0.5)
    p.add_argument("--max-strain", type=float, default=0.12)
    p.add_argument("--points", type=int, default=121)
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("diagnose", help="R-hat and ESS for chain files")
    p.add_argument("chains", nargs="+")
    p.add_argument("--out")
    p.add_argument("--rhat-threshold", type=float, default=1.05)
    _common(p, seed=False)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("estimate-sigma", help="noise sd from a fit to low-strain data")
    p.add_argument("data", nargs="+")
    p.add_argument("--max-strain", type=float, default=0.02)
    p.add_argument("--out")
    _common(p, seed=False)
    p.set_defaults(func=cmd_estimate_sigma)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    """Install config-file values as subparser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    cp = configparser.ConfigParser()
    if not cp.read(known.config):
        raise UsageError(f"cannot read config file {known.config}")
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subparsers.choices:
        return
    sp = subparsers.choices[command]
    section = cp[command] if cp.has_section(command) else cp.defaults()
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in section.items():
        dest = key.replace("-", "_")
        if dest not in actions:
            if key in cp.defaults() and not (cp.has_section(command) and key in cp._sections[command]):
                continue
            raise UsageError(f"unknown config key {key!r} for {command}")
        act = actions[dest]
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = cp.BOOLEAN_STATES.get(raw.lower())
            if defaults[dest] is None:
                raise UsageError(f"config key {key!r} must be a boolean")
        elif act.nargs in ("+", "*") or isinstance(act.nargs, int):
            conv = act.type or str
            defaults[dest] = [conv(v) for v in raw.split()]
        else:
            defaults[dest] = (act.type or str)(raw)
        if act.required:
            act.required = False
    sp.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (UsageError, ValueError) as err:
        print(f"tendonfit: {err}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, DomainError, FileNotFoundError, FileExistsError) as err:
        print(f"tendonfit: {err}", file=sys.stderr)
        return EXIT_DATA
    except UsageError as err:
        print(f"tendonfit: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
