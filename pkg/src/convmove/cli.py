"""Command-line pipeline: simulate, fit, fit-network, bma, predict, degree, report.

Every subcommand reads a typed INI config (``--config``), writes into one run
directory (``--run-dir`` or ``$CONVMOVE_RUN_DIR``) and records a manifest
listing each output file with its SHA-256 hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bma import (WarpMixture, averaged_warp_derivative, model_averaged_predict,
                  posterior_model_probs, write_warp_derivative_csv)
from .config import RUN_DIR_ENV, ConfigError, config_text, load_config, write_manifest
from .gp import credible_circle_radius, path_summaries
from .kernels import TimeGrid
from .mcmc import FitConfig, PosteriorChains, deviance_screen, fit_many, fit_single, precompute_phi_gram
from .network import GroupChains, GroupData, GroupModelSpec, apply_holdout, fit_group
from .simulate import GroupScenario, SimScenario, regular_schedule, simulate_group, simulate_trajectory
from .telemetry import ProjectionMeta, TelemetrySet, ingest, project_and_scale, unscale_positions
from .warp import WarpSpec, enumerate_warp_candidates

log = logging.getLogger("convmove")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _seeds(seed: int, n: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def _write_rows(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.12g}" if isinstance(v, (float, np.floating)) else v for v in r])
    return Path(path)


def _write_json(path, obj) -> Path:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Path(path)


def _read_json(path):
    if not Path(path).exists():
        raise UsageError(f"missing input {path}; run the producing subcommand first")
    with open(path) as fh:
        return json.load(fh)


def _fit_config(cfg, m=None) -> FitConfig:
    mc = cfg["mcmc"]
    return FitConfig(
        phi_grid=np.linspace(mc["phi_min"], mc["phi_max"], mc["n_phi"]),
        family=cfg["kernels"]["family"],
        m=cfg["kernels"]["m_single"] if m is None else m,
        meas_var_prior=(mc["meas_var_shape"], mc["meas_var_scale"]),
        meas_var_prior_order="shape-scale",
        ratio_sd_upper=mc["ratio_sd_upper"],
        iterations=mc["iterations"],
        burn_in=mc["burn_in"],
        thin=mc["thin"],
        seed=cfg["run"]["seed"],
        proposal_sd=mc["proposal_sd"],
    )


def _group_spec(cfg, J) -> GroupModelSpec:
    nc, kc = cfg["network"], cfg["kernels"]
    return GroupModelSpec(
        J=J,
        grid=TimeGrid(kc["t_start"], kc["t_end"], kc["m_group"]),
        latent_grid=TimeGrid(kc["t_start"], kc["t_end"], nc["latent_m"]),
        phi=nc["phi"], sigma_z=nc["sigma_z"], phi_z=nc["phi_z"],
        meas_var_prior=(nc["meas_var_shape"], nc["meas_var_scale"]),
        ratio_prior=(nc["ratio_shape"], nc["ratio_scale"]),
        phi_prior=(nc["phi_shape"], nc["phi_rate"]),
        origin_var_prior=(nc["origin_var_shape"], nc["origin_var_scale"]),
    )


def _load_telemetry(cfg, path) -> TelemetrySet:
    io = cfg["cli_io"]
    raw = ingest(path, xy_km=io["xy_km"])
    center = None
    if io["center_lon"] is not None or io["center_lat"] is not None:
        if io["center_lon"] is None or io["center_lat"] is None:
            raise ConfigError("set both cli_io.center_lon and cli_io.center_lat")
        center = (io["center_lon"], io["center_lat"])
    return project_and_scale(raw, center=center, standardize=io["standardize"],
                             rescale_time=io["rescale_time"])


def _stage_telemetry(ts: TelemetrySet, run: Path) -> list[Path]:
    ts.to_csv(run / "scaled_telemetry.csv")
    _write_json(run / "projection.json", ts.meta.to_dict())
    _write_json(run / "ingest_report.json", ts.report.to_dict())
    return [run / "scaled_telemetry.csv", run / "projection.json", run / "ingest_report.json"]


def _staged(run: Path) -> TelemetrySet:
    path = run / "scaled_telemetry.csv"
    if not path.exists():
        raise UsageError(f"missing input {path}; run fit or fit-network first")
    rows = list(csv.DictReader(open(path, newline="")))
    cols = [c for c in rows[0] if c not in ("id", "time")]
    meta = ProjectionMeta.from_dict(_read_json(run / "projection.json"))
    return TelemetrySet([r["id"] for r in rows], [float(r["time"]) for r in rows],
                        [(float(r[cols[0]]), float(r[cols[1]])) for r in rows],
                        "scaled" if meta.standardized else "km", meta)


def _single_individual(cfg, ts: TelemetrySet) -> str:
    ident = cfg["cli_io"]["individual"]
    inds = ts.individuals
    if ident:
        if ident not in inds:
            raise UsageError(f"individual {ident!r} not in the telemetry (have {', '.join(inds)})")
        return ident
    if len(inds) > 1:
        raise UsageError("telemetry holds several individuals; set cli_io.individual")
    return inds[0]


def _group_data(ts: TelemetrySet) -> GroupData:
    ids = ts.individuals
    parts = [ts.individual(i) for i in ids]
    return GroupData([p[0] for p in parts], [p[1] for p in parts], ids)


def _parse_holdout(text: str, ids: list[str]):
    windows = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        try:
            ident, lo, hi = item.split(":")
            windows.append((ids.index(ident.strip()), float(lo), float(hi)))
        except ValueError as exc:
            raise ConfigError(f"bad holdout window {item!r}; expected id:lo:hi") from exc
    return windows


def _load_models(run: Path, cfg):
    doc = _read_json(run / "models.json")
    fc = _fit_config(cfg, m=doc["m"])
    ts = _staged(run)
    t, xy = ts.individual(doc["individual"])
    chains = []
    for entry in doc["models"]:
        ch = PosteriorChains.from_csv(run / entry["chain_file"], entry, fc.phi_grid)
        ch.cache = precompute_phi_gram((t, xy), fc, ch.warp)
        chains.append(ch)
    return doc, fc, ts, chains


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(cfg, run: Path, args) -> list[Path]:
    sc = cfg["simulate"]
    seed = cfg["run"]["seed"]
    gaps = sc["gaps"]
    if len(gaps) % 2:
        raise ConfigError("simulate.gaps needs pairs of (lo, hi)")
    gaps = list(zip(gaps[::2], gaps[1::2]))
    times = regular_schedule(sc["n"], 0.0, 1.0, gaps)
    tel, truth = [], []
    if sc["kind"] == "single":
        warp = None
        if sc["warp_center"] is not None:
            warp = WarpSpec(sc["warp_center"], sc["warp_scale"], sc["warp_magnitude"])
        res = simulate_trajectory(SimScenario(times, sc["meas_var"], sc["proc_var"], sc["range"],
                                              cfg["kernels"]["family"], warp,
                                              TimeGrid(0.0, 1.0, sc["m"]), seed=seed))
        for i, t in enumerate(res.times):
            tel.append(("1", t, *res.obs[i]))
            truth.append(("1", t, *res.truth[i]))
    elif sc["kind"] == "group":
        J = sc["n_individuals"]
        pos = np.asarray(sc["latent_positions"], dtype=float)
        if pos.size != 2 * J:
            raise ConfigError(f"simulate.latent_positions needs {2 * J} numbers (x y per individual)")
        lg = TimeGrid(0.0, 1.0, sc["latent_m"])
        z = np.broadcast_to(pos.reshape(J, 1, 2), (J, lg.m, 2)).copy()
        res = simulate_group(GroupScenario([times] * J, z, sc["meas_var"], sc["proc_var"], sc["range"],
                                           TimeGrid(0.0, 1.0, cfg["kernels"]["m_group"]), lg,
                                           sc["phi_z"], seed=seed))
        for j in range(J):
            for i, t in enumerate(res.times[j]):
                tel.append((str(j + 1), t, *res.obs[j][i]))
                truth.append((str(j + 1), t, *res.truth[j][i]))
    else:
        raise ConfigError(f"simulate.kind must be 'single' or 'group', got {sc['kind']!r}")
    return [_write_rows(run / "telemetry.csv", ["id", "time", "x_km", "y_km"], tel),
            _write_rows(run / "truth.csv", ["time", "individual", "true_x", "true_y"],
                        [(t, i, x, y) for i, t, x, y in truth])]


def cmd_fit(cfg, run: Path, args) -> list[Path]:
    ts = _load_telemetry(cfg, args.input)
    outputs = _stage_telemetry(ts, run)
    ident = _single_individual(cfg, ts)
    t, xy = ts.individual(ident)
    fc = _fit_config(cfg)
    mc, wc = cfg["mcmc"], cfg["warp"]
    s_base, s_warps = _seeds(cfg["run"]["seed"], 2)
    log.info("baseline fit for individual %s (%d fixes)", ident, len(t))
    base = fit_single((t, xy), None, fc, model_id=0, seed=s_base)
    candidates = enumerate_warp_candidates(
        wc["n_centers"],
        np.linspace(wc["scale_min"], wc["scale_max"], wc["n_scales"]),
        np.linspace(wc["magnitude_min"], wc["magnitude_max"], wc["n_magnitudes"]),
        (fc.grid.t_start, fc.grid.t_end),
    )
    ranked, base_dev = deviance_screen((t, xy), candidates, base, fc, top_k=mc["top_k"])
    outputs.append(_write_rows(
        run / "screen.csv", ["rank", "center", "scale", "magnitude", "deviance", "baseline_deviance"],
        [(r.rank, r.warp.center, r.warp.scale, r.warp.magnitude, r.deviance, base_dev) for r in ranked]))
    log.info("fitting %d screened warps", len(ranked))
    fits = fit_many((t, xy), [r.warp for r in ranked], fc, jobs=cfg["run"]["jobs"], seed=s_warps)
    models = ([base] if mc["include_unwarped"] else []) + fits
    (run / "chains").mkdir(exist_ok=True)
    entries = []
    for k, ch in enumerate(models):
        ch.model_id = k
        name = f"chains/model_{k:03d}.csv"
        ch.to_csv(run / name)
        outputs.append(run / name)
        entries.append({**ch.manifest(), "chain_file": name, "summary": ch.summary()})
    outputs.append(_write_json(run / "models.json", {"individual": ident, "m": fc.m, "models": entries}))
    return outputs


def cmd_bma(cfg, run: Path, args) -> list[Path]:
    doc, fc, ts, chains = _load_models(run, cfg)
    probs = posterior_model_probs(chains, None, cfg["bma"]["second_stage_iterations"],
                                  seed=_seeds(cfg["run"]["seed"], 3)[2])
    prior = np.full(len(chains), 1.0 / len(chains))
    mix = WarpMixture(chains, probs, prior)
    rows = []
    for ch, p, q in zip(chains, probs, prior):
        w = ch.warp
        rows.append((ch.model_id, "" if w is None else w.center, "" if w is None else w.scale,
                     "" if w is None else w.magnitude, float(q), float(p)))
    out = [_write_rows(run / "bma_probs.csv", ["model_id", "center", "scale", "magnitude",
                                               "prior_prob", "prob"], rows)]
    mix.to_json(run / "mixture.json")
    out.append(run / "mixture.json")
    curve = averaged_warp_derivative(mix, np.linspace(fc.grid.t_start, fc.grid.t_end,
                                                      cfg["gp"]["n_pred"]), cfg["gp"]["level"])
    write_warp_derivative_csv(run / "warp_derivative.csv", curve, chains)
    out.append(run / "warp_derivative.csv")
    return out


def _mixture_from_run(run: Path, cfg):
    doc, fc, ts, chains = _load_models(run, cfg)
    path = run / "bma_probs.csv"
    if not path.exists():
        raise UsageError(f"missing input {path}; run bma first")
    rows = list(csv.DictReader(open(path, newline="")))
    probs = np.array([float(r["prob"]) for r in rows])
    prior = np.array([float(r["prior_prob"]) for r in rows])
    return doc, fc, ts, WarpMixture(chains, probs / probs.sum(), prior)


def cmd_predict(cfg, run: Path, args) -> list[Path]:
    gc = cfg["gp"]
    doc, fc, ts, mix = _mixture_from_run(run, cfg)
    t_pred = np.linspace(fc.grid.t_start, fc.grid.t_end, gc["n_pred"])
    draws = model_averaged_predict(mix, t_pred, gc["n_draws"], seed=_seeds(cfg["run"]["seed"], 4)[3])
    meta = ts.meta
    rows = []
    for d in range(draws.n_draws):
        for i, t in enumerate(t_pred):
            rows.append((d, t, draws.draws[d, i, 0], draws.draws[d, i, 1], int(draws.provenance[d])))
    out = [_write_rows(run / "predictions.csv", ["draw", "time", "x", "y", "model_id"], rows)]
    mean = draws.mean()
    geo = unscale_positions(mean, meta, to_lonlat=True)
    radius = [credible_circle_radius(draws, i, gc["level"]) for i in range(len(t_pred))]
    summ = [(t, mean[i, 0], mean[i, 1], geo[i, 0], geo[i, 1], radius[i], radius[i] * meta.scale_km)
            for i, t in enumerate(t_pred)]
    cols = ["lon", "lat"] if meta.projected else ["x_km", "y_km"]
    out.append(_write_rows(run / "prediction_summary.csv",
                           ["time", "mean_x", "mean_y", *cols, "radius", "radius_km"], summ))
    ps = path_summaries(draws, meta)
    out.append(_write_json(run / "path_summary.json",
                           {k: v for k, v in ps.items() if not isinstance(v, np.ndarray)}))
    return out


def _network_chains(run: Path, cfg, name: str):
    doc = _read_json(run / "network.json")
    spec = _group_spec(cfg, len(doc["individuals"]))
    path = run / name
    if not path.exists():
        raise UsageError(f"missing input {path}; run fit-network first")
    return doc, GroupChains.load(path, spec, doc.get("accept"), doc.get("seed"))


def cmd_fit_network(cfg, run: Path, args) -> list[Path]:
    nc = cfg["network"]
    ts = _load_telemetry(cfg, args.input)
    outputs = _stage_telemetry(ts, run)
    data = _group_data(ts)
    windows = _parse_holdout(nc["holdout"], data.ids)
    if windows:
        data = apply_holdout(data, windows)
    spec = _group_spec(cfg, data.J)
    s_joint, s_ind = _seeds(cfg["run"]["seed"], 2)
    kw = dict(iterations=nc["iterations"], burn_in=nc["burn_in"], thin=nc["thin"])
    joint = fit_group(data, spec, seed=s_joint, **kw)
    joint.save(run / "network_joint.npz")
    joint.to_csv(run / "network_chains.csv")
    outputs += [run / "network_joint.npz", run / "network_chains.csv"]
    if nc["fit_independent"]:
        ind = fit_group(data, spec, seed=s_ind, fixed_network="independent", **kw)
        ind.save(run / "network_independent.npz")
        outputs.append(run / "network_independent.npz")
    t_grid = np.linspace(spec.grid.t_start, spec.grid.t_end, cfg["gp"]["n_pred"])
    nu_mean = joint.nu_draws(t_grid).mean(axis=0)
    rows = [(data.ids[j], data.ids[k], t, nu_mean[j, k, i])
            for j in range(data.J) for k in range(data.J) for i, t in enumerate(t_grid)]
    outputs.append(_write_rows(run / "nu_mean.csv", ["individual", "other", "time", "nu"], rows))
    outputs.append(_write_json(run / "network.json", {
        "individuals": data.ids, "holdout": [[data.ids[j], lo, hi] for j, lo, hi in windows],
        "seed": s_joint, "accept": joint.accept, "summary": joint.summary(),
        "spec": spec.to_dict()}))
    return outputs


def cmd_degree(cfg, run: Path, args) -> list[Path]:
    doc, joint = _network_chains(run, cfg, "network_joint.npz")
    spec = joint.spec
    t_grid = np.linspace(spec.grid.t_start, spec.grid.t_end, cfg["gp"]["n_pred"])
    deg = joint.degree_draws(t_grid)                        # (S, J, n)
    lo, hi = np.quantile(deg, [0.025, 0.975], axis=0)
    mean = deg.mean(axis=0)
    rows = [(ident, t, mean[j, i], lo[j, i], hi[j, i])
            for j, ident in enumerate(doc["individuals"]) for i, t in enumerate(t_grid)]
    return [_write_rows(run / "degree.csv", ["individual", "time", "mean", "q025", "q975"], rows)]


def _uncertainty(cfg, run: Path) -> Path | None:
    doc, joint = _network_chains(run, cfg, "network_joint.npz")
    if not (run / "network_independent.npz").exists():
        return None
    _, ind = _network_chains(run, cfg, "network_independent.npz")
    ts = _staged(run)
    data = _group_data(ts)
    windows = [(doc["individuals"].index(i), lo, hi) for i, lo, hi in doc["holdout"]]
    if windows:
        data = apply_holdout(data, windows)
    from .network import uncertainty_comparison

    spec = joint.spec
    t_grid = np.linspace(spec.grid.t_start, spec.grid.t_end, cfg["gp"]["n_pred"])
    res = uncertainty_comparison(data, joint, ind, t_grid, cfg["network"]["per_draw"],
                                 _seeds(cfg["run"]["seed"], 5)[4], cfg["gp"]["level"])
    rows = [(ident, t, res["radius_joint"][j, i], res["radius_independent"][j, i])
            for j, ident in enumerate(data.ids) for i, t in enumerate(t_grid)]
    return _write_rows(run / "report" / "uncertainty.csv",
                       ["individual", "time", "radius_joint", "radius_independent"], rows)


def _read_csv_columns(path):
    rows = list(csv.DictReader(open(path, newline="")))
    return rows


def cmd_report(cfg, run: Path, args) -> list[Path]:
    from . import plotting

    fmt = cfg["cli_io"]["plot_format"]
    rep = run / "report"
    rep.mkdir(exist_ok=True)
    out = []
    if (run / "warp_derivative.csv").exists():
        rows = _read_csv_columns(run / "warp_derivative.csv")
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        models = [k for k in rows[0] if k.startswith("model_")]
        out.append(_write_rows(rep / "warp_derivative.csv", ["t", "averaged", "lower", "upper", "reference"],
                               zip(col("t"), col("averaged"), col("lower"), col("upper"), col("reference"))))
        fig = plotting.plot_warp_derivative(col("t"), col("averaged"), col("lower"), col("upper"),
                                            [col(k) for k in models])
        out.append(Path(plotting.save_figure(fig, rep / "warp_derivative", fmt)))
    if (run / "prediction_summary.csv").exists():
        rows = _read_csv_columns(run / "prediction_summary.csv")
        mean = np.array([[float(r["mean_x"]), float(r["mean_y"])] for r in rows])
        doc = _read_json(run / "models.json")
        ts = _staged(run)
        _, obs = ts.individual(doc["individual"])
        out.append(_write_rows(rep / "trajectory.csv", ["time", "mean_x", "mean_y", "radius"],
                               [(float(r["time"]), float(r["mean_x"]), float(r["mean_y"]),
                                 float(r["radius"])) for r in rows]))
        fig = plotting.plot_trajectory(mean, obs)
        out.append(Path(plotting.save_figure(fig, rep / "trajectory", fmt)))
        fig = plotting.plot_uncertainty({doc["individual"]: (np.array([float(r["time"]) for r in rows]),
                                                             np.array([float(r["radius"]) for r in rows]),
                                                             None)})
        out.append(Path(plotting.save_figure(fig, rep / "trajectory_uncertainty", fmt)))
    if (run / "network_joint.npz").exists():
        if not (run / "degree.csv").exists():
            cmd_degree(cfg, run, args)
        rows = _read_csv_columns(run / "degree.csv")
        curves = {}
        for ident in dict.fromkeys(r["individual"] for r in rows):
            sel = [r for r in rows if r["individual"] == ident]
            curves[ident] = tuple(np.array([float(r[k]) for r in sel])
                                  for k in ("time", "mean", "q025", "q975"))
            out.append(_write_rows(rep / f"degree_{ident}.csv", ["time", "mean", "q025", "q975"],
                                   zip(*curves[ident])))
        out.append(Path(plotting.save_figure(plotting.plot_degree(curves), rep / "degree", fmt)))
        unc = _uncertainty(cfg, run)
        if unc is not None:
            out.append(unc)
            rows = _read_csv_columns(unc)
            curves = {}
            for ident in dict.fromkeys(r["individual"] for r in rows):
                sel = [r for r in rows if r["individual"] == ident]
                curves[ident] = tuple(np.array([float(r[k]) for r in sel])
                                      for k in ("time", "radius_joint", "radius_independent"))
            out.append(Path(plotting.save_figure(plotting.plot_uncertainty(curves),
                                                 rep / "uncertainty", fmt)))
    if not out:
        raise UsageError(f"nothing to report in {run}; run fit/bma/predict or fit-network first")
    return out


COMMANDS = {
    "simulate": (cmd_simulate, "simulate telemetry with known parameters", False),
    "fit": (cmd_fit, "screen warps and fit one chain per candidate for one individual", True),
    "fit-network": (cmd_fit_network, "fit the group model with a latent dynamic network", True),
    "bma": (cmd_bma, "posterior model probabilities and averaged warp derivative", False),
    "predict": (cmd_predict, "model-averaged posterior predictive trajectories", False),
    "degree": (cmd_degree, "individual degree curves from a network fit", False),
    "report": (cmd_report, "plot-ready CSV and line charts for completed stages", False),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convmove", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, helptext, needs_input) in COMMANDS.items():
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="INI config file (defaults apply to missing keys)")
        sp.add_argument("--run-dir", default=os.environ.get(RUN_DIR_ENV),
                        help=f"output directory (default ${RUN_DIR_ENV})")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--jobs", type=int, help="override run.jobs")
        sp.add_argument("-v", "--verbose", action="store_true")
        if needs_input:
            sp.add_argument("--input", required=True, help="telemetry CSV")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.run_dir:
            raise UsageError(f"no run directory; pass --run-dir or set ${RUN_DIR_ENV}")
        overrides = {}
        if args.seed is not None:
            overrides[("run", "seed")] = args.seed
        if args.jobs is not None:
            overrides[("run", "jobs")] = args.jobs
        cfg = load_config(args.config, overrides)
        run = Path(args.run_dir)
        run.mkdir(parents=True, exist_ok=True)
        (run / f"config_{args.command}.ini").write_text(config_text(cfg))
        inputs = [args.input] if getattr(args, "input", None) else []
        if inputs and not Path(inputs[0]).exists():
            raise UsageError(f"input file {inputs[0]} not found")
        outputs = COMMANDS[args.command][0](cfg, run, args)
        outputs.append(run / f"config_{args.command}.ini")
        write_manifest(run, args.command, cfg, cfg["run"]["seed"], outputs, inputs)
    except (UsageError, ConfigError, ValueError, KeyError) as exc:
        print(f"convmove {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
