import numpy as np
import pandas as pd
import pytest

import bless.dpe
from bless.cli import load_dataset, main
from bless.io import read_ensemble, read_maps, read_volumes
from bless.vi import NumericalError


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(d), "--n", "60", "--lambda", "3", "--seed", "7", "--dims", "6,6"]) == 0
    return d


def test_simulate_outputs(sim_dir):
    data, mask = load_dataset(sim_dir)
    assert data.N == 60 and mask.M == 36 and data.names == ("sex", "group")
    assert read_maps(sim_dir / "truth_active.blsv", mask).shape == (36, 2)
    assert "sim.N = 60" in (sim_dir / "resolved_config.txt").read_text()


def test_full_workflow(sim_dir, tmp_path):
    vi, bb, gb, ff, ev, cl, ep = (tmp_path / n for n in ("vi", "bb", "gibbs", "firth", "eval", "cl", "plots"))
    assert main(["fit-vi", "--data", str(sim_dir), "--out", str(vi)]) == 0
    path = pd.read_csv(vi / "regularization_path.csv")
    assert path.nu0.nunique() == 15 and len(path) == 15 * 36 * 2
    assert len(pd.read_csv(vi / "marginal_trace.csv")) == 15
    assert main(["fit-bb", "--data", str(sim_dir), "--vi", str(vi), "--out", str(bb), "--b", "1000",
                 "--alpha", "1"]) == 0
    assert read_ensemble(bb / "ensemble.blsb").shape == (1000, 36, 2)
    assert main(["fit-gibbs", "--data", str(sim_dir), "--vi", str(vi), "--out", str(gb), "--iterations", "300",
                 "--burn-in", "100", "--dump-draws"]) == 0
    assert read_ensemble(gb / "gibbs_draws.blsb").shape == (200, 36, 2)
    assert main(["fit-firth", "--data", str(sim_dir), "--out", str(ff)]) == 0
    assert main(["evaluate", "--data", str(sim_dir), "--out", str(ev), "--vi", str(vi), "--bb", str(bb),
                 "--gibbs", str(gb), "--firth", str(ff)]) == 0
    rates = pd.read_csv(ev / "eval_rates.csv")
    assert set(rates.method) == {"BLESS-VI", "BB-BLESS", "BLESS-Gibbs", "Firth"}
    assert len(pd.read_csv(ev / "eval_distance.csv")) == 36
    coef = pd.read_csv(ev / "eval_coef.csv")
    assert np.allclose(coef.mse, coef.bias ** 2 + coef.variance)
    assert main(["cluster", "--data", str(sim_dir), "--bb", str(bb), "--out", str(cl), "--covariate", "sex"]) == 0
    assert read_volumes(cl / "prevalence.blsv").shape == (1, 6, 6)
    assert main(["export-plots", "--vi", str(vi), "--out", str(ep)]) == 0
    assert (ep / "regularization_path.csv").read_bytes() == (vi / "regularization_path.csv").read_bytes()
    for d in (vi, bb, gb, ff, ev, cl, ep):
        assert (d / "resolved_config.txt").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("sim.N = 40\nsim.dims = 4,4\nsim.seed = 3\n", encoding="utf-8")
    out = tmp_path / "s"
    assert main(["simulate", "--config", str(cfg), "--n", "25", "--out", str(out)]) == 0
    text = (out / "resolved_config.txt").read_text()
    assert "sim.N = 25" in text and "sim.dims = 4,4" in text and "sim.seed = 3" in text
    out2 = tmp_path / "s2"
    assert main(["simulate", "--config", str(cfg), "--set", "sim.lam=0.0", "--out", str(out2)]) == 0
    assert read_volumes(out2 / "Y.blsv").sum() == 0


def test_exit_codes(sim_dir, tmp_path, monkeypatch, capsys):
    assert main(["simulate", "--out", str(tmp_path / "x"), "--set", "sim.bogus=1"]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["fit-vi", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "y")]) == 2
    assert "missing input file" in capsys.readouterr().err
    assert main(["simulate", "--out", str(tmp_path / "z"), "--dims", "5,5"]) == 2

    def boom(*a, **k):
        raise NumericalError("forced")

    monkeypatch.setattr(bless.dpe, "run_dpe", boom)
    assert main(["fit-vi", "--data", str(sim_dir), "--out", str(tmp_path / "w")]) == 3
    assert "numerical failure" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["no-such-command"])
