import json
import shutil
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from metrovuln.config import PipelineConfig
from metrovuln.panel import Panel, slots_per_day
from metrovuln.pipeline import run_all

ROOT = Path(__file__).resolve().parents[1]
FROZEN_CONFIG = ROOT / "configs" / "frozen.json"

# filled by the acceptance module, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def make_panel(W, entry=None, speed=None, interval_min=360, stations=None, days=None,
               outward=None, inward=None, extra=None):
    """Panel from (n_stations, n_days, slots) arrays, for matching/effect fixtures."""
    W = np.asarray(W, dtype=np.int64)
    n, D, S = W.shape
    assert S == slots_per_day(interval_min)
    stations = stations or [f"S{i}" for i in range(n)]
    days = days or list(pd.bdate_range("2024-01-01", periods=D).strftime("%Y-%m-%d"))
    units = pd.DataFrame({
        "station": np.repeat(stations, D * S),
        "day": np.tile(np.repeat(days, S), n),
        "slot": np.tile(np.arange(S), n * D),
        "W": W.reshape(-1),
        "entry": (np.zeros(n * D * S) if entry is None else np.asarray(entry, float).reshape(-1)),
        "avg_speed": (np.full(n * D * S, 30.0) if speed is None
                      else np.asarray(speed, float).reshape(-1)),
    })
    for k, v in (extra or {}).items():
        units[k] = np.asarray(v).reshape(-1)
    shape = (n * D * S, n)
    return Panel(stations, days, interval_min, units,
                 np.zeros(shape, dtype=np.int64) if outward is None else np.asarray(outward),
                 np.zeros(shape, dtype=np.int64) if inward is None else np.asarray(inward))


def frozen_config(out, **overrides):
    d = json.loads(FROZEN_CONFIG.read_text())
    d["out"] = str(out)
    d.update(overrides)
    return PipelineConfig.from_dict(d)


@pytest.fixture(scope="session")
def frozen_run(tmp_path_factory):
    """The full pipeline on the frozen confounded scenario, run once per session."""
    import time
    out = tmp_path_factory.mktemp("frozen")
    cfg = frozen_config(out)
    t0 = time.perf_counter()
    run_all(cfg)
    elapsed = time.perf_counter() - t0
    yield {"cfg": cfg, "out": out, "elapsed": elapsed}
    shutil.rmtree(out, ignore_errors=True)


@pytest.fixture(scope="session")
def frozen_panel(frozen_run):
    out = frozen_run["out"]
    meta = json.loads((out / "panel_meta.json").read_text())
    return Panel.from_csv(out / "panel.csv", out / "flows.csv", meta["interval_min"])
