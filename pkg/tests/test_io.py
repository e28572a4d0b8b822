import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bless.io import (ConfigError, FormatError, RunConfig, load_arrays, read_ensemble, read_maps, read_nifti,
                      read_volumes, save_arrays, write_ensemble, write_maps, write_volumes)
from bless.lattice import LatticeMask

dims_st = st.one_of(st.tuples(st.integers(1, 6), st.integers(1, 6)),
                    st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)))


@settings(max_examples=40, deadline=None)
@given(dims_st, st.integers(0, 3), st.booleans(), st.data())
def test_volume_round_trip(dims, count, binary, data):
    dt = np.uint8 if binary else np.float64
    elems = st.integers(0, 1) if binary else st.floats(allow_nan=False, width=64)
    v = data.draw(arrays(dt, (count,) + dims, elements=elems))
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "v.blsv"
        write_volumes(p, v)
        back = read_volumes(p)
        assert back.dtype == dt and back.shape == v.shape and np.array_equal(back, v)


def test_volume_layout_first_axis_fastest(tmp_path):
    v = np.arange(6, dtype=float).reshape(1, 2, 3)
    write_volumes(tmp_path / "a.blsv", v)
    raw = (tmp_path / "a.blsv").read_bytes()
    assert raw[:4] == b"BLSV"
    header = 4 + 4 + 4 + 8 + 4 + 1
    payload = np.frombuffer(raw[header:], "<f8")
    assert payload.tolist() == v[0].reshape(-1, order="F").tolist()


def test_volume_errors(tmp_path):
    p = tmp_path / "a.blsv"
    write_volumes(p, np.zeros((2, 3, 3), np.uint8))
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_volumes(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_volumes(p)
    with pytest.raises(FormatError):
        write_volumes(p, np.zeros((2, 3)))


def test_maps_round_trip(tmp_path):
    vol = np.ones((4, 5), bool)
    vol[0, 0] = vol[3, 2] = False
    mask = LatticeMask.from_array(vol)
    vals = np.random.default_rng(0).standard_normal((mask.M, 3))
    write_maps(tmp_path / "m.blsv", vals, mask)
    assert np.array_equal(read_maps(tmp_path / "m.blsv", mask), vals)
    with pytest.raises(FormatError):
        read_maps(tmp_path / "m.blsv", LatticeMask.full((5, 4)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(1, 3)),
              elements=st.floats(allow_nan=False, width=64)))
def test_ensemble_round_trip(s):
    import tempfile
    from pathlib import Path
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "e.blsb"
        write_ensemble(p, s)
        assert np.array_equal(read_ensemble(p), s)


def test_ensemble_corruption(tmp_path):
    p = tmp_path / "e.blsb"
    write_ensemble(p, np.arange(24.0).reshape(2, 4, 3))
    raw = bytearray(p.read_bytes())
    assert len(raw) == 4 + 16 + 24 * 8 + 8
    bad = raw.copy()
    bad[40] ^= 1
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="checksum"):
        read_ensemble(p)
    p.write_bytes(bytes(raw[:-20]))
    with pytest.raises(FormatError):
        read_ensemble(p)
    p.write_bytes(bytes(raw[:10]))
    with pytest.raises(FormatError):
        read_ensemble(p)
    with pytest.raises(FormatError):
        write_ensemble(p, np.zeros((2, 3)))


def test_npz_bytes_are_deterministic(tmp_path):
    arrs = dict(b=np.arange(5.0), a=np.eye(2), s=np.array(["x", "yy"]))
    save_arrays(tmp_path / "1.npz", **arrs)
    save_arrays(tmp_path / "2.npz", **dict(reversed(list(arrs.items()))))
    assert (tmp_path / "1.npz").read_bytes() == (tmp_path / "2.npz").read_bytes()
    back = load_arrays(tmp_path / "1.npz")
    assert set(back) == set(arrs) and all(np.array_equal(back[k], arrs[k]) for k in arrs)


def test_run_config(tmp_path):
    cfg = RunConfig()
    assert cfg["model.theta_ridge"] == 1.0 and cfg["dpe.steps"] == 15 and cfg["model.nu1"] == 10.0
    f = tmp_path / "c.txt"
    f.write_text("# comment\nsim.N = 250  # trailing\n\nsim.dims = 20,30\nbootstrap.nu0_target = none\n"
                 "gibbs.keep_gamma = yes\nmodel.wishart_df = 3\n", encoding="utf-8")
    cfg.load(f)
    assert cfg["sim.N"] == 250 and cfg["sim.dims"] == (20, 30) and cfg["bootstrap.nu0_target"] is None
    assert cfg["gibbs.keep_gamma"] is True and cfg["model.wishart_df"] == 3
    assert cfg.sim().N == 250 and cfg.gibbs().keep_gamma
    hp = cfg.hyperparams()
    assert len(hp.nu0_sequence) == 15 and np.isclose(np.log(hp.nu0_sequence[-1]), -20)
    again = RunConfig()
    (tmp_path / "d.txt").write_text(cfg.dump(), encoding="utf-8")
    again.load(tmp_path / "d.txt")
    assert again.dump() == cfg.dump()
    cfg.write(tmp_path)
    assert (tmp_path / "resolved_config.txt").read_text(encoding="utf-8") == cfg.dump()


@pytest.mark.parametrize("text", ["sim.typo = 3", "nosection = 1", "sim.N = abc", "sim.N 3",
                                  "gibbs.keep_gamma = maybe"])
def test_run_config_errors(tmp_path, text):
    f = tmp_path / "c.txt"
    f.write_text(text + "\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig().load(f)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig().load(tmp_path / "absent.txt")


def test_read_nifti(tmp_path):
    nib = pytest.importorskip("nibabel")
    arr = (np.random.default_rng(1).random((4, 5, 3)) > 0.5).astype(np.uint8)
    for name in ("a.nii", "b.nii.gz"):
        nib.save(nib.Nifti1Image(arr, np.eye(4)), str(tmp_path / name))
        assert np.array_equal(read_nifti(tmp_path / name), arr)
