"""Regularization path and approximate log-marginal trace over the spike-variance ladder.

    python scripts/dpe_path.py --n 1000 --lam 3 --seed 1 --out results/path
"""

from __future__ import annotations

import argparse
from pathlib import Path

from bless.dpe import export_marginal_trace, export_regularization_path, run_dpe
from bless.firth import fit_all_voxels
from bless.lattice import build_graph
from bless.model import Hyperparams
from bless.sim import SimConfig, generate_dataset
from bless.vi import default_init


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--lam", type=float, default=3.0)
    ap.add_argument("--dims", default="50,50")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = tuple(int(d) for d in args.dims.split(","))
    data, truth, mask = generate_dataset(SimConfig(N=args.n, lam=args.lam, dims=dims, seed=args.seed))
    graph = build_graph(mask)
    hp = Hyperparams()
    ff = fit_all_voxels(data, workers=args.workers)
    path = run_dpe(data, hp, graph, default_init(data, hp, ff, graph))
    reg = export_regularization_path(path, data.names)
    # flag the simulation truth so plots can colour active and inactive voxels
    col = reg.covariate.map({n: p for p, n in enumerate(data.names)}).to_numpy()
    reg["truth_active"] = truth.active[reg.voxel.to_numpy(), col]
    reg.to_csv(out / "regularization_path.csv", index=False)
    trace = export_marginal_trace(path)
    trace.to_csv(out / "marginal_trace.csv", index=False)
    print(trace.to_string(index=False))


if __name__ == "__main__":
    main()
