"""Command-line front end: simulate | fit | study | assign | export-heatmap.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
failure, 3 more than 10% of study replicates failed, 4 fit completed but
did not meet the convergence rule (artifact written and flagged).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig, resolve_seed, resolve_threads
from .errors import ConfigError, DomainError, NumericalError
from . import fileio

logger = logging.getLogger("bprvi")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
EXIT_STUDY_PARTIAL = 3
EXIT_NOT_CONVERGED = 4

STUDY_FAILURE_LIMIT = 0.10


def _threads(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _prepare(args):
    cfg = RunConfig.load(args.config)
    seed = resolve_seed(args.seed, cfg)
    if seed is not None:
        cfg.svi = dataclasses.replace(cfg.svi, seed=seed)
        cfg.mcmc = dataclasses.replace(cfg.mcmc, seed=seed)
        cfg.simulation = dataclasses.replace(cfg.simulation, seed=seed)
    cfg.seed = seed
    threads = resolve_threads(getattr(args, "threads", None), cfg)
    return cfg, threads


def _ensure_dir(path: str, force: bool):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigError(f"{path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    from .simulation import generate_cohort

    cfg, threads = _prepare(args)
    spec = cfg.simulation
    out = args.out or "cohort.csv"
    truth_path = (out[:-4] if out.endswith(".csv") else out) + ".truth.json"
    for path in (out, fileio.schema_path(out), truth_path):
        fileio.check_writable(path, args.force)
    with _threads(threads):
        data, truth = generate_cohort(spec, args.replicate)
    prov = fileio.provenance(cfg.digest(), spec.seed)
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    fileio.write_cohort(out, data, prov)
    fileio.write_json(truth_path, {"spec": spec.to_dict(), "replicate": args.replicate, "truth": truth.to_dict()}, prov)
    print(f"wrote {out} ({data.n} rows), {truth_path}")
    return EXIT_OK


# --------------------------------------------------------------------- fit

def _posterior_rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7]))


def _samples_from_artifact(art: dict):
    from .model import ModelConfig
    from .posterior import draw_posterior, samples_from_raw
    from .svi import VariationalState
    from .transforms import ParamLayout

    m = dict(art["model"])
    m["alpha_bounds"] = tuple(m["alpha_bounds"])
    m["beta_prior"] = tuple(m["beta_prior"])
    model = ModelConfig(**m)
    lay = ParamLayout(**art["layout"])
    if art["fitter"] == "mcmc":
        d = art["draws"]
        return samples_from_raw(np.asarray(d["raw"]), lay, model, "mcmc", np.asarray(d["chain"])), lay, model
    st = art["state"]
    state = VariationalState(np.asarray(st["mu"]), np.asarray(st["chol"]), st["step"])
    return draw_posterior(state, lay, model, art["n_draws"], _posterior_rng(art["posterior_seed"])), lay, model


def _write_heatmaps(outdir: str, summary, threshold: float, prov: dict, scales=("logodds", "probability")):
    from .posterior import heatmap_matrix

    paths = []
    for scale in scales:
        mat, rows, cols = heatmap_matrix(summary, scale, threshold)
        path = os.path.join(outdir, f"heatmap_{scale}.csv")
        fileio.write_labeled_table(path, "cluster", rows, cols, mat, prov)
        paths.append(path)
    return paths


def _fit_one(data, cfg: RunConfig, fitter: str, outdir: str, prov: dict, label: str) -> int:
    from .mcmc import rwm_sample_target
    from .posterior import draw_posterior, nonempty_clusters, samples_from_raw, summarize
    from .svi import fit_target
    from .transforms import BPRTarget

    target = BPRTarget(data, cfg.model)
    art = {
        "fitter": fitter,
        "stratum": label,
        "model": dataclasses.asdict(cfg.model),
        "layout": dataclasses.asdict(target.layout),
        "x_names": list(data.x_names),
        "w_names": list(data.w_names),
        "y_name": data.y_name if data.has_response else None,
        "n_obs": data.n,
        "n_draws": cfg.n_draws,
        "mass": cfg.mass,
    }
    code = EXIT_OK
    if fitter == "svi":
        state, trace = fit_target(target, cfg.svi)
        art["svi"] = dataclasses.asdict(cfg.svi)
        art["state"] = {"mu": state.mu.tolist(), "chol": state.chol.tolist(), "step": state.step}
        art["trace"] = {
            "elbo_history": trace.elbo_history,
            "wall_time": trace.wall_time,
            "terminated_reason": trace.terminated_reason,
            "error": trace.error,
        }
        art["converged"] = trace.converged
        art["posterior_seed"] = cfg.svi.seed
        if trace.terminated_reason == "failed":
            code = EXIT_NUMERICAL
        elif not trace.converged:
            code = EXIT_NOT_CONVERGED
        samples = draw_posterior(state, target.layout, cfg.model, cfg.n_draws, _posterior_rng(cfg.svi.seed))
    else:
        draws = rwm_sample_target(target, cfg.mcmc)
        art["mcmc"] = dataclasses.asdict(cfg.mcmc)
        art["acceptance_rate"] = draws.acceptance_rate.tolist()
        art["draws"] = {"raw": draws.flat.tolist(), "chain": draws.chain_index.tolist()}
        art["converged"] = True
        samples = samples_from_raw(draws.flat, target.layout, cfg.model, "mcmc", draws.chain_index)

    summary = summarize(samples, data.n, cfg.reference_vectors(list(data.w_names)), data.x_names, data.w_names,
                        cfg.mass)
    art["nonempty_clusters"] = nonempty_clusters(summary, cfg.nonempty_threshold)
    art["summary"] = summary.to_dict()
    os.makedirs(outdir, exist_ok=True)
    fileio.write_json(os.path.join(outdir, "fit.json"), art, prov)
    _write_heatmaps(outdir, summary, cfg.nonempty_threshold, prov)
    status = {EXIT_OK: "converged", EXIT_NOT_CONVERGED: "NOT CONVERGED (flagged)",
              EXIT_NUMERICAL: "FAILED"}[code]
    print(f"{label or 'fit'}: n={data.n} non-empty clusters={art['nonempty_clusters']} [{status}] -> {outdir}")
    return code


def cmd_fit(args) -> int:
    cfg, threads = _prepare(args)
    if cfg.seed is None:
        cfg.seed = cfg.svi.seed
    roles = fileio.load_roles(args.cohort, cfg.columns)
    if args.stratify:
        roles = dataclasses.replace(roles, strata=args.stratify)
    data, strata, _ = fileio.read_cohort(args.cohort, roles)
    out = args.out or "fit_out"
    _ensure_dir(out, args.force)
    prov = fileio.provenance(cfg.digest(), cfg.seed)
    codes = []
    with _threads(threads):
        if args.stratify:
            for value in sorted(set(strata.tolist())):
                rows = np.flatnonzero(strata == value)
                sub = data.subset(rows)
                safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in value)
                codes.append(_fit_one(sub, cfg, args.fitter, os.path.join(out, f"stratum_{safe}"), prov, value))
        else:
            codes.append(_fit_one(data, cfg, args.fitter, out, prov, None))
    if EXIT_NUMERICAL in codes:
        return EXIT_NUMERICAL
    if EXIT_NOT_CONVERGED in codes:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ------------------------------------------------------------------ assign

def cmd_assign(args) -> int:
    from .config import ColumnRoles
    from .posterior import relabel, responsibilities

    art = fileio.read_json(args.artifact)
    header, _ = fileio._read_header(args.cohort)
    for col in art["x_names"] + art["w_names"]:
        if col not in header:
            raise DomainError(f"{args.cohort}: column {col!r} required by the fit artifact is missing")
    outcome = art.get("y_name") if art.get("y_name") in header else None
    roles = ColumnRoles(art["x_names"], art["w_names"], outcome, None, "id" if "id" in header else None)
    data, _, ids = fileio.read_cohort(args.cohort, roles)
    samples, _, _ = _samples_from_artifact(art)
    resp = responsibilities(relabel(samples), data)
    out = args.out or "assignments.csv"
    fileio.check_writable(out, args.force)
    k = resp.r.shape[1]
    cols = ([roles.id] if ids is not None else []) + [f"r_{j + 1}" for j in range(k)] + ["label"]
    prov = art["provenance"]
    with open(out, "w", newline="") as fh:
        fh.write("".join(f"# {key}: {val}\n" for key, val in prov.items()))
        wr = csv.writer(fh)
        wr.writerow(cols)
        labels = resp.labels
        for i in range(data.n):
            row = ([ids[i]] if ids is not None else []) + [repr(float(v)) for v in resp.r[i]] + [int(labels[i])]
            wr.writerow(row)
    print(f"wrote {out} ({data.n} rows, {k} clusters)")
    return EXIT_OK


# ---------------------------------------------------------- export-heatmap

def cmd_export_heatmap(args) -> int:
    from .posterior import ClusterSummary

    art = fileio.read_json(args.artifact)
    summary = ClusterSummary.from_dict(art["summary"])
    out = args.out or os.path.dirname(os.path.abspath(args.artifact))
    os.makedirs(out, exist_ok=True)
    scales = ("logodds", "probability") if args.scale == "both" else (args.scale,)
    for s in scales:
        fileio.check_writable(os.path.join(out, f"heatmap_{s}.csv"), args.force)
    for path in _write_heatmaps(out, summary, args.threshold, art["provenance"], scales):
        print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------- study

def _parse_fracs(text: str) -> list:
    try:
        fr = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"--sweep expects comma-separated fractions, got {text!r}") from exc
    if not fr or any(not 0 < f <= 1 for f in fr):
        raise ConfigError("--sweep fractions must lie in (0, 1]")
    return fr


def cmd_study(args) -> int:
    from .simulation import batch_size_sweep, run_study

    cfg, threads = _prepare(args)
    out = args.out or "study_out"
    _ensure_dir(out, args.force)

    def progress(rec):
        tag = "ok" if rec.get("ok") else f"FAILED ({rec.get('error')})"
        print(f"  replicate {rec['replicate']}: {tag}", flush=True)

    kw = dict(n_draws=cfg.n_draws, mass=cfg.mass, n_jobs=cfg.n_jobs, progress=progress)
    with _threads(threads):
        if args.sweep:
            if args.fitter != "svi":
                raise ConfigError("--sweep varies the SVI batch size; it needs --fitter svi")
            results = batch_size_sweep(cfg.simulation, _parse_fracs(args.sweep), cfg.model, cfg.svi, **kw)
        else:
            results = [run_study(cfg.simulation, cfg.model, cfg.svi, args.fitter, cfg.mcmc, **kw)]
    prov = fileio.provenance(cfg.digest(), cfg.simulation.seed)
    fields = ["batch_fraction", "parameter", "kind", "truth", "bias", "logodds_bias", "coverage",
              "mean_interval_width"]
    with open(os.path.join(out, "study.csv"), "w", newline="") as fh:
        fh.write("".join(f"# {k}: {v}\n" for k, v in prov.items()))
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for res in results:
            for row in res.rows():
                wr.writerow({"batch_fraction": "" if res.batch_fraction is None else res.batch_fraction, **row})
    fileio.write_json(os.path.join(out, "study.json"),
                      {"spec": cfg.simulation.to_dict(), "results": [r.to_dict() for r in results]}, prov)
    worst = 0
    for res in results:
        total = res.n_replicates + res.n_failed
        print(f"fraction={res.batch_fraction}: {res.n_replicates}/{total} replicates ok")
        worst = max(worst, res.n_failed / max(total, 1))
    return EXIT_STUDY_PARTIAL if worst > STUDY_FAILURE_LIMIT else EXIT_OK


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="overrides the config seed and $BPRVI_SEED")
    common.add_argument("--threads", type=int, help="cap on BLAS threads; overrides $BPRVI_THREADS")
    common.add_argument("--out", help="output path")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bprvi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"bprvi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a synthetic cohort CSV and its ground truth")
    s.add_argument("--replicate", type=int, default=0, help="replicate index within the simulation seed")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common], help="fit a cohort CSV")
    f.add_argument("cohort")
    f.add_argument("--stratify", metavar="COL", help="fit each value of COL separately")
    f.add_argument("--fitter", choices=("svi", "mcmc"), default="svi")
    f.set_defaults(func=cmd_fit)

    st = sub.add_parser("study", parents=[common], help="replicate bias / coverage study")
    st.add_argument("--sweep", metavar="FRACS", help="comma-separated batch fractions, e.g. 0.01,0.1,1")
    st.add_argument("--fitter", choices=("svi", "mcmc"), default="svi")
    st.set_defaults(func=cmd_study)

    a = sub.add_parser("assign", parents=[common], help="cluster responsibilities for a cohort")
    a.add_argument("artifact")
    a.add_argument("cohort")
    a.set_defaults(func=cmd_assign)

    h = sub.add_parser("export-heatmap", parents=[common], help="re-export heatmap CSVs from a fit artifact")
    h.add_argument("artifact")
    h.add_argument("--scale", choices=("logodds", "probability", "both"), default="both")
    h.add_argument("--threshold", type=float, default=1.0, help="minimum expected cluster size")
    h.set_defaults(func=cmd_export_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DomainError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
