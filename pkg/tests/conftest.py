"""Shared fixtures: an on-disk cache for expensive fits and the acceptance summary."""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np
import pytest

import bless
from bless.io import load_arrays, save_arrays

CACHE_DIR = Path(__file__).parent / ".cache"
SRC_DIR = Path(bless.__file__).parent


def source_digest() -> str:
    """Hash of the package sources; any code change invalidates cached fits."""
    h = hashlib.sha256()
    for f in sorted(SRC_DIR.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


_DIGEST = source_digest()


def cached(name: str, params: dict, compute):
    """Load ``compute()``'s dict of arrays from the cache or compute and store it."""
    key = hashlib.sha256(json.dumps([name, params, _DIGEST], sort_keys=True, default=str).encode())
    path = CACHE_DIR / f"{name}-{key.hexdigest()[:16]}.npz"
    if path.exists():
        return load_arrays(path)
    out = {k: np.asarray(v) for k, v in compute().items()}
    CACHE_DIR.mkdir(exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_arrays(tmp, **out)
    tmp.replace(path)
    return out


# ------------------------------------------------------- acceptance summary

_DETAILS: dict[int, str] = {}


@pytest.fixture
def report(request):
    """``report(k, text)`` attaches a one-line result to acceptance criterion k."""

    def _report(k: int, text: str) -> None:
        _DETAILS[k] = text
        print(f"criterion {k}: {text}")

    return _report


_CRIT = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    status = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRIT.search(getattr(rep, "nodeid", ""))
            if m and rep.when in ("call", "setup"):
                k = int(m.group(1))
                if outcome == "passed" and rep.when == "setup":
                    continue
                status[k] = "PASS" if outcome == "passed" else "FAIL"
    if not status:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(status):
        terminalreporter.write_line(f"criterion {k:2d}: {status[k]}  {_DETAILS.get(k, '')}")
