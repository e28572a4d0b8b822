"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd

from . import __version__
from .io import (ConfigError, FormatError, RunConfig, load_arrays, read_ensemble, read_maps,
                 read_nifti, read_volumes, save_arrays, write_ensemble, write_maps, write_volumes)
from .lattice import LatticeMask, build_graph
from .model import Dataset
from .vi import NumericalError, VariationalState

log = logging.getLogger("bless")

STATE_FIELDS = ("m_beta", "S_beta", "m_beta0", "v_beta0", "q_gamma", "m_theta", "S_theta", "xi",
                "wishart_scale")


# ------------------------------------------------------------------ helpers


def _need(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input file {path}")
    return path


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def save_dataset(outdir: Path, data: Dataset, mask: LatticeMask) -> None:
    write_volumes(outdir / "mask.blsv", mask.inside.reshape(mask.dims, order="F")[None].astype(np.uint8))
    full = np.zeros((data.N, mask.inside.size), dtype=np.uint8)
    full[:, mask.sites] = data.Y
    write_volumes(outdir / "Y.blsv", np.stack([f.reshape(mask.dims, order="F") for f in full]))
    pd.DataFrame(data.X, columns=list(data.names)).to_csv(outdir / "X.csv", index=False)


def load_dataset(datadir) -> tuple[Dataset, LatticeMask]:
    d = Path(datadir)
    vols = read_volumes(_need(d / "Y.blsv"))
    dims = vols.shape[1:]
    if (d / "mask.blsv").exists():
        mvol = read_volumes(d / "mask.blsv")
        if mvol.shape[1:] != dims:
            raise FormatError(f"mask dims {mvol.shape[1:]} do not match data dims {dims}")
        mask = LatticeMask.from_array(mvol[0] > 0)
    else:
        mask = LatticeMask.full(dims)
    X = pd.read_csv(_need(d / "X.csv"))
    if len(X) != vols.shape[0]:
        raise FormatError(f"X.csv has {len(X)} rows but Y.blsv holds {vols.shape[0]} volumes")
    Y = vols.reshape(vols.shape[0], -1, order="F")[:, mask.sites]
    return Dataset(Y, X.to_numpy(dtype=float), tuple(X.columns)), mask


def save_state(path: Path, vs: VariationalState) -> None:
    arrays = {k: getattr(vs, k) for k in STATE_FIELDS}
    save_arrays(path, wishart_df=np.array(vs.wishart_df), **arrays)


def load_state(path: Path) -> VariationalState:
    a = load_arrays(_need(path))
    return VariationalState(**{k: a[k] for k in STATE_FIELDS}, wishart_df=float(a["wishart_df"]),
                            status="loaded")


def _coef_table(mean, names, **cols) -> pd.DataFrame:
    M, P = mean.shape
    out = {"voxel": np.repeat(np.arange(M), P), "covariate": np.tile(list(names), M),
           "mean": mean.reshape(-1)}
    out.update({k: np.asarray(v).reshape(-1) for k, v in cols.items()})
    return pd.DataFrame(out)


def _config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.load(args.config)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v)
    for flag, key in getattr(args, "_overrides", ()):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.set(key, str(val))
    return cfg


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg: RunConfig):
    from .sim import generate_dataset

    out = _outdir(args.out)
    sc = cfg.sim()
    data, truth, mask = generate_dataset(sc)
    save_dataset(out, data, mask)
    write_maps(out / "truth_beta.blsv", truth.beta, mask)
    write_maps(out / "truth_active.blsv", truth.active.astype(np.uint8), mask)
    write_maps(out / "truth_beta0.blsv", truth.beta0, mask)
    cfg.write(out)
    log.info("simulated N=%d M=%d into %s", data.N, data.M, out)


def cmd_fit_firth(args, cfg: RunConfig):
    from .firth import bh_fdr_adjust, fit_all_voxels

    data, mask = load_dataset(args.data)
    out = _outdir(args.out)
    ff = fit_all_voxels(data, workers=int(cfg["run.workers"]))
    pv = np.where(ff.degenerate[:, None], 1.0, ff.pvalues[:, 1:])
    adj, rej = bh_fdr_adjust(pv, cfg["run.fdr"])
    write_maps(out / "firth_coef.blsv", ff.coef, mask)
    write_maps(out / "firth_se.blsv", np.nan_to_num(ff.se, nan=0.0), mask)
    write_maps(out / "firth_pvalue.blsv", ff.pvalues, mask)
    write_maps(out / "bh_adjusted.blsv", adj, mask)
    write_maps(out / "bh_rejected.blsv", rej.astype(np.uint8), mask)
    _coef_table(ff.coef[:, 1:], data.names, se=ff.se[:, 1:], pvalue=ff.pvalues[:, 1:],
                bh_adjusted=adj, bh_rejected=rej).to_csv(out / "firth_summary.csv", index=False)
    save_arrays(out / "firth.npz", coef=ff.coef, se=ff.se, pvalues=ff.pvalues,
                converged=ff.converged, degenerate=ff.degenerate)
    cfg.write(out)


def cmd_fit_vi(args, cfg: RunConfig):
    from .dpe import export_marginal_trace, export_regularization_path, run_dpe
    from .firth import fit_all_voxels
    from .vi import default_init

    data, mask = load_dataset(args.data)
    out = _outdir(args.out)
    hp = cfg.hyperparams()
    graph = build_graph(mask)
    ff = fit_all_voxels(data, workers=int(cfg["run.workers"]))
    path = run_dpe(data, hp, graph, default_init(data, hp, ff, graph))
    fin = path.final.state
    save_state(out / "vi_state.npz", fin)
    save_arrays(out / "dpe_path.npz", nu0=path.nu0, log_marginal=path.log_marginals,
                coef=np.stack([s.state.m_beta for s in path.steps]),
                active=np.stack([s.active for s in path.steps]),
                sweeps=np.array([s.state.n_sweeps for s in path.steps]),
                status=np.array([s.state.status for s in path.steps]),
                names=np.array(list(data.names)))
    export_regularization_path(path, data.names).to_csv(out / "regularization_path.csv", index=False)
    export_marginal_trace(path).to_csv(out / "marginal_trace.csv", index=False)
    write_maps(out / "vi_mean.blsv", fin.m_beta, mask)
    write_maps(out / "vi_sd.blsv", fin.sd_beta, mask)
    write_maps(out / "inclusion.blsv", fin.q_gamma, mask)
    write_maps(out / "active.blsv", path.final.active.astype(np.uint8), mask)
    _coef_table(fin.m_beta, data.names, sd=fin.sd_beta, inclusion=fin.q_gamma,
                active=path.final.active).to_csv(out / "vi_summary.csv", index=False)
    cfg.write(out)


def cmd_fit_bb(args, cfg: RunConfig):
    from .bootstrap import run_bootstrap

    data, mask = load_dataset(args.data)
    out = _outdir(args.out)
    warm = load_state(Path(args.vi) / "vi_state.npz")
    if warm.M != data.M:
        raise FormatError(f"VI state has {warm.M} voxels but the data has {data.M}")
    hp = cfg.hyperparams()
    ens = run_bootstrap(data, hp, build_graph(mask), cfg.bootstrap(), warm)
    write_ensemble(out / "ensemble.blsb", ens.samples)
    write_maps(out / "bb_mean.blsv", ens.mean, mask)
    write_maps(out / "bb_sd.blsv", ens.sd, mask)
    write_maps(out / "bb_tstat.blsv", np.nan_to_num(ens.tstat), mask)
    t = cfg["run.t_threshold"]
    _coef_table(ens.mean, data.names, sd=ens.sd, tstat=ens.tstat,
                active=np.abs(np.nan_to_num(ens.tstat)) > t).to_csv(out / "bb_summary.csv", index=False)
    pd.DataFrame(ens.failed, columns=["replicate", "error"]).to_csv(out / "failed.csv", index=False)
    cfg.write(out)


def cmd_fit_gibbs(args, cfg: RunConfig):
    from .gibbs import chain_summary, run_gibbs

    data, mask = load_dataset(args.data)
    out = _outdir(args.out)
    init = load_state(Path(args.vi) / "vi_state.npz") if args.vi else None
    if init is not None and init.M != data.M:
        raise FormatError(f"VI state has {init.M} voxels but the data has {data.M}")
    chain = run_gibbs(data, cfg.hyperparams(), build_graph(mask), cfg.gibbs(), init)
    s = chain_summary(chain)
    t = cfg["run.t_threshold"]
    write_maps(out / "gibbs_mean.blsv", s.mean, mask)
    write_maps(out / "gibbs_sd.blsv", s.sd, mask)
    write_maps(out / "gibbs_tstat.blsv", np.nan_to_num(s.tstat), mask)
    write_maps(out / "gibbs_inclusion.blsv", chain.gamma_mean, mask)
    _coef_table(s.mean, data.names, sd=s.sd, tstat=s.tstat, ess=s.ess, inclusion=chain.gamma_mean,
                active=np.abs(np.nan_to_num(s.tstat)) > t).to_csv(out / "gibbs_summary.csv", index=False)
    if args.dump_draws:
        size = chain.beta.nbytes / 2 ** 20
        if size > 512:
            log.warning("writing %.0f MiB of draws", size)
        write_ensemble(out / "gibbs_draws.blsb", chain.beta)
    cfg.write(out)


def cmd_evaluate(args, cfg: RunConfig):
    from .metrics import confusion_rates, gaussian_samples, posterior_distance, reported_trio
    from .rng import stream

    data, mask = load_dataset(args.data)
    out = _outdir(args.out)
    d = Path(args.data)
    truth = read_maps(_need(d / "truth_active.blsv"), mask).astype(bool)
    beta = read_maps(_need(d / "truth_beta.blsv"), mask)
    rows, coef_rows = [], []
    ests = {}
    if args.vi:
        v = Path(args.vi)
        vs = load_state(v / "vi_state.npz")
        ests["BLESS-VI"] = (read_maps(v / "active.blsv", mask).astype(bool), vs.m_beta, vs.sd_beta ** 2)
    if args.bb:
        b = Path(args.bb)
        ens = read_ensemble(_need(b / "ensemble.blsb"))
        mean, sd = ens.mean(axis=0), ens.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = np.where(sd > 0, mean / sd, 0.0)
        ests["BB-BLESS"] = (np.abs(tt) > cfg["run.t_threshold"], mean, sd ** 2)
    if args.gibbs:
        g = Path(args.gibbs)
        tab = pd.read_csv(_need(g / "gibbs_summary.csv"))
        shape = (data.M, data.P)
        ests["BLESS-Gibbs"] = (tab["active"].to_numpy(bool).reshape(shape), tab["mean"].to_numpy().reshape(shape),
                               tab["sd"].to_numpy().reshape(shape) ** 2)
    if args.firth:
        f = Path(args.firth)
        a = load_arrays(_need(f / "firth.npz"))
        rej = read_maps(f / "bh_rejected.blsv", mask).astype(bool)
        ests["Firth"] = (rej, a["coef"][:, 1:], np.nan_to_num(a["se"][:, 1:]) ** 2)
    if not ests:
        raise ConfigError("evaluate needs at least one of --vi, --bb, --gibbs, --firth")
    for method, (act, mean, var) in ests.items():
        for p, name in enumerate(data.names):
            r = confusion_rates(act[:, p], truth[:, p])
            rows.append({"method": method, "covariate": name, **r.as_dict()})
            for vset, (bias, vv, mse) in reported_trio(mean[:, p], var[:, p], beta[:, p], truth[:, p]).items():
                coef_rows.append({"method": method, "covariate": name, "voxels": vset,
                                  "bias": bias, "variance": vv, "mse": mse})
    pd.DataFrame(rows).to_csv(out / "eval_rates.csv", index=False)
    pd.DataFrame(coef_rows).to_csv(out / "eval_coef.csv", index=False)
    if args.gibbs and (Path(args.gibbs) / "gibbs_draws.blsb").exists():
        gd = read_ensemble(Path(args.gibbs) / "gibbs_draws.blsb")
        dist = {}
        if args.vi:
            vs = load_state(Path(args.vi) / "vi_state.npz")
            vi = gaussian_samples(vs.m_beta, vs.S_beta, gd.shape[0], stream(cfg["sim.seed"], "vi-samples"))
            dv = posterior_distance(vi, gd)
            dist["kl_vi_gibbs"], dist["w1_vi_gibbs"] = dv.kl, dv.w1
        if args.bb:
            ens = read_ensemble(Path(args.bb) / "ensemble.blsb")
            if ens.shape[0] >= 30:
                db = posterior_distance(ens, gd)
                dist["kl_bb_gibbs"], dist["w1_bb_gibbs"] = db.kl, db.w1
            else:
                log.warning("skipping BB distances: %d replicates (< 30)", ens.shape[0])
        if dist:
            pd.DataFrame({"voxel": np.arange(data.M), **dist}).to_csv(out / "eval_distance.csv", index=False)
    cfg.write(out)


def cmd_cluster(args, cfg: RunConfig):
    from .bootstrap import PosteriorEnsemble
    from .clusters import cluster_size_inference, cluster_size_mapping

    data, mask = load_dataset(args.data)
    out = _outdir(args.out)
    samples = read_ensemble(_need(Path(args.bb) / "ensemble.blsb"))
    if samples.shape[1] != data.M:
        raise FormatError(f"ensemble has {samples.shape[1]} voxels but the mask has {data.M}")
    p = data.names.index(args.covariate) if args.covariate in data.names else int(args.covariate)
    ens = PosteriorEnsemble(samples)
    graph = build_graph(mask)
    cdt, level = cfg["run.cdt"], cfg["run.level"]
    rep = cluster_size_inference(ens, graph, p, cdt, level, args.two_sided, mask)
    sm = cluster_size_mapping(ens, graph, p, cdt, args.prevalence_cut, args.two_sided, mask)
    rep.table().to_csv(out / "clusters.csv", index=False)
    write_maps(out / "cluster_labels.blsv", rep.labels.astype(float), mask, fill=-1.0)
    write_maps(out / "prevalence.blsv", sm.prevalence, mask)
    write_maps(out / "size_mean.blsv", np.nan_to_num(sm.size_mean), mask)
    write_maps(out / "size_sd.blsv", np.nan_to_num(sm.size_sd), mask)
    cfg.write(out)


def cmd_export_plots(args, cfg: RunConfig):
    from .dpe import DpePath, DpeStep, export_marginal_trace, export_regularization_path

    a = load_arrays(_need(Path(args.vi) / "dpe_path.npz"))
    out = _outdir(args.out)
    steps = []
    for k in range(a["nu0"].size):
        st = SimpleNamespace(m_beta=a["coef"][k], n_sweeps=int(a["sweeps"][k]), status=str(a["status"][k]))
        steps.append(DpeStep(float(a["nu0"][k]), st, a["active"][k], float(a["log_marginal"][k])))
    path = DpePath(steps)
    export_regularization_path(path, [str(n) for n in a["names"]]).to_csv(
        out / "regularization_path.csv", index=False)
    export_marginal_trace(path).to_csv(out / "marginal_trace.csv", index=False)
    cfg.write(out)


def cmd_convert_nifti(args, cfg: RunConfig):
    vols = [read_nifti(_need(Path(f))) for f in args.inputs]
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise FormatError(f"input volumes differ in shape: {sorted(shapes)}")
    write_volumes(args.out, (np.stack(vols) > 0).astype(np.uint8))


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bless", description="Spatial spike-and-slab lesion mapping.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_, overrides=()):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--workers", type=int, help="worker processes")
        p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
        p.set_defaults(func=func, _overrides=(("workers", "run.workers"),) + tuple(overrides))
        return p

    p = add("simulate", cmd_simulate, "simulate a lesion dataset with known truth",
            (("n", "sim.N"), ("lam", "sim.lam"), ("seed", "sim.seed"), ("dims", "sim.dims")))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--dims", help="e.g. 50,50")

    p = add("fit-vi", cmd_fit_vi, "BLESS-VI with dynamic posterior exploration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("fit-bb", cmd_fit_bb, "BB-BLESS bootstrap ensemble",
            (("b", "bootstrap.B"), ("alpha", "bootstrap.alpha"), ("seed", "bootstrap.base_seed")))
    p.add_argument("--data", required=True)
    p.add_argument("--vi", required=True, help="fit-vi output directory (warm start)")
    p.add_argument("--out", required=True)
    p.add_argument("--b", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int)

    p = add("fit-gibbs", cmd_fit_gibbs, "BLESS Gibbs sampler",
            (("iterations", "gibbs.iterations"), ("burn_in", "gibbs.burn_in"),
             ("seed", "gibbs.seed"), ("thin", "gibbs.thin")))
    p.add_argument("--data", required=True)
    p.add_argument("--vi", help="fit-vi output directory (initial state)")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-draws", action="store_true", help="also write all retained beta draws")

    p = add("fit-firth", cmd_fit_firth, "voxelwise Firth probit with BH adjustment")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "rates, bias/variance/MSE and posterior distances vs truth")
    p.add_argument("--data", required=True, help="simulate output directory (with truth)")
    p.add_argument("--out", required=True)
    for m in ("vi", "bb", "gibbs", "firth"):
        p.add_argument(f"--{m}", help=f"fit-{m} output directory")

    p = add("cluster", cmd_cluster, "bootstrap cluster-size inference and mapping")
    p.add_argument("--data", required=True)
    p.add_argument("--bb", required=True, help="fit-bb output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--covariate", default="0", help="name or index")
    p.add_argument("--two-sided", action="store_true")
    p.add_argument("--prevalence-cut", type=float, default=0.5)

    p = add("export-plots", cmd_export_plots, "regularization-path and marginal-trace tables")
    p.add_argument("--vi", required=True)
    p.add_argument("--out", required=True)

    p = add("convert-nifti", cmd_convert_nifti, "binarise NIfTI-1 lesion masks into a volume file")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except NumericalError as e:
        log.debug("numerical failure", exc_info=True)
        print(f"bless: numerical failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as e:
        log.debug("input error", exc_info=True)
        print(f"bless: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
