"""On-disk formats and run configuration.

Volume file (``.blsv``), all integers little-endian::

    b"BLSV" | u32 version | u32 ndim | u32 dims[ndim] | u32 count | u8 dtype | payload

dtype 0 is uint8, 1 is float64; each volume is stored with the first axis
varying fastest.

Ensemble file (``.blsb``)::

    b"BLSB" | u32 version | u32 B | u32 M | u32 P | f64[B, M, P] | u64 checksum

The checksum is an 8-byte BLAKE2b digest of everything before it.

Run configuration is a UTF-8 ``section.key = value`` file with ``#``
comments.  Unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import io
import struct
import zipfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from .lattice import LatticeMask

VERSION = 1
_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ volumes


def write_volumes(path, volumes) -> None:
    """Write an array of shape (count, *dims), dims 2-D or 3-D."""
    v = np.asarray(volumes)
    dims = v.shape[1:]
    if len(dims) not in (2, 3):
        raise FormatError("volumes must be (count, *dims) with 2 or 3 dims")
    if v.dtype == np.bool_ or v.dtype == np.uint8:
        tag, payload = 0, v.astype("u1")
    else:
        tag, payload = 1, v.astype("<f8")
    head = b"BLSV" + struct.pack(f"<II{len(dims)}II", VERSION, len(dims), *dims, v.shape[0]) + bytes([tag])
    body = b"".join(np.asfortranarray(vol).tobytes(order="F") for vol in payload)
    Path(path).write_bytes(head + body)


def read_volumes(path) -> np.ndarray:
    """Array of shape (count, *dims)."""
    raw = Path(path).read_bytes()
    if raw[:4] != b"BLSV":
        raise FormatError(f"{path}: not a volume file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION or ndim not in (2, 3):
        raise FormatError(f"{path}: unsupported version {version} or ndim {ndim}")
    off = 12
    dims = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tag = raw[off]
    off += 1
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    size = int(np.prod(dims))
    if len(raw) - off != count * size * dt.itemsize:
        raise FormatError(f"{path}: payload length does not match header")
    flat = np.frombuffer(raw, dtype=dt, offset=off).reshape(count, size)
    return np.stack([f.reshape(dims, order="F") for f in flat]) if count else np.zeros((0,) + dims, dt)


def write_maps(path, values, mask: LatticeMask, fill=0) -> None:
    """Write (M,) or (M, K) per-voxel values as K volumes."""
    v = np.asarray(values)
    cols = v.reshape(v.shape[0], -1).T
    write_volumes(path, np.stack([mask.to_volume(c, fill) for c in cols]))


def read_maps(path, mask: LatticeMask) -> np.ndarray:
    """(M, K) per-voxel values from a K-volume file."""
    vols = read_volumes(path)
    if vols.shape[1:] != tuple(mask.dims):
        raise FormatError(f"{path}: dims {vols.shape[1:]} do not match mask {tuple(mask.dims)}")
    return np.stack([mask.from_volume(v) for v in vols], axis=1)


# ---------------------------------------------------------------- ensembles


def _checksum(b: bytes) -> bytes:
    return hashlib.blake2b(b, digest_size=8).digest()


def write_ensemble(path, samples) -> None:
    s = np.asarray(samples, dtype="<f8")
    if s.ndim != 3:
        raise FormatError("ensemble samples must be (B, M, P)")
    body = b"BLSB" + struct.pack("<IIII", VERSION, *s.shape) + np.ascontiguousarray(s).tobytes()
    Path(path).write_bytes(body + _checksum(body))


def read_ensemble(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"BLSB":
        raise FormatError(f"{path}: not an ensemble file")
    if len(raw) < 28:
        raise FormatError(f"{path}: truncated")
    body, digest = raw[:-8], raw[-8:]
    if _checksum(body) != digest:
        raise FormatError(f"{path}: checksum mismatch (file corrupted)")
    version, B, M, P = struct.unpack_from("<IIII", body, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(body) - 20 != B * M * P * 8:
        raise FormatError(f"{path}: payload length does not match header")
    return np.frombuffer(body, dtype="<f8", offset=20).reshape(B, M, P).copy()


# ------------------------------------------------------- array containers


def save_arrays(path, **arrays) -> None:
    """Byte-reproducible ``.npz`` (fixed zip timestamps, sorted entries)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_arrays(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def read_nifti(path) -> np.ndarray:
    """Voxel data of a NIfTI-1 file (``.nii`` or ``.nii.gz``); affine ignored."""
    try:
        import nibabel
    except ImportError as e:  # pragma: no cover - optional dependency
        raise FormatError("reading NIfTI needs the optional 'nibabel' package") from e
    img = nibabel.load(str(path))
    return np.asarray(img.dataobj)


# -------------------------------------------------------------------- config


def _parse_value(text: str, like):
    t = text.strip()
    if isinstance(like, bool):
        if t.lower() in ("true", "1", "yes"):
            return True
        if t.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {t!r}")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    if isinstance(like, tuple):
        return tuple(int(x) for x in t.split(","))
    if like is None:
        if t.lower() == "none":
            return None
        try:
            return int(t)
        except ValueError:
            return float(t)
    return t


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Sectioned key/value settings with typed defaults.

    Sections: ``sim``, ``model``, ``dpe``, ``bootstrap``, ``gibbs``, ``run``.
    """

    def __init__(self):
        from .bootstrap import BootstrapConfig
        from .gibbs import GibbsConfig
        from .sim import SimConfig

        self.values = {
            "sim": {f.name: getattr(SimConfig(), f.name) for f in fields(SimConfig)},
            "model": {"nu1": 10.0, "sigma0_sq": 100.0, "wishart_df": None, "epsilon": 1e-3,
                      "max_sweeps": 2000, "theta_ridge": 1.0},
            "dpe": {"log_nu0_max": -1.0, "log_nu0_min": -20.0, "steps": 15},
            "bootstrap": {f.name: getattr(BootstrapConfig(), f.name) for f in fields(BootstrapConfig)
                          if f.name != "workers"},
            "gibbs": {f.name: getattr(GibbsConfig(), f.name) for f in fields(GibbsConfig)},
            "run": {"workers": 1, "cdt": 2.3, "level": 0.95, "fdr": 0.05, "t_threshold": 1.96},
        }

    def set(self, key: str, value) -> None:
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like section.name")
        sec, name = key.split(".", 1)
        if sec not in self.values or name not in self.values[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        like = self.values[sec][name]
        if isinstance(value, str):
            try:
                value = _parse_value(value, like)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}") from None
        self.values[sec][name] = value

    def load(self, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = line.split("=", 1)
            try:
                self.set(k.strip(), v)
            except ConfigError as e:
                raise ConfigError(f"{path}:{n}: {e}") from None
        return self

    def dump(self) -> str:
        lines = []
        for sec in sorted(self.values):
            for name in sorted(self.values[sec]):
                lines.append(f"{sec}.{name} = {_fmt(self.values[sec][name])}")
        return "\n".join(lines) + "\n"

    def write(self, outdir) -> None:
        Path(outdir, "resolved_config.txt").write_text(self.dump(), encoding="utf-8")

    def __getitem__(self, key):
        sec, name = key.split(".", 1)
        return self.values[sec][name]

    # typed views --------------------------------------------------------

    def hyperparams(self):
        from .model import Hyperparams, default_nu0_sequence

        d, m = self.values["dpe"], self.values["model"]
        seq = default_nu0_sequence(d["log_nu0_min"], d["log_nu0_max"], int(d["steps"]))
        return Hyperparams(nu0_sequence=seq, nu1=m["nu1"], sigma0_sq=m["sigma0_sq"],
                           wishart_df=m["wishart_df"], epsilon=m["epsilon"],
                           max_sweeps=int(m["max_sweeps"]), theta_ridge=m["theta_ridge"])

    def sim(self):
        from .sim import SimConfig

        return SimConfig(**self.values["sim"])

    def bootstrap(self):
        from .bootstrap import BootstrapConfig

        return BootstrapConfig(**self.values["bootstrap"], workers=int(self["run.workers"]))

    def gibbs(self):
        from .gibbs import GibbsConfig

        return GibbsConfig(**self.values["gibbs"])
