from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("fmx", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fmx")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def within_se(estimate_samples, value, k=3.0):
    """True when ``value`` lies within k standard errors of the sample mean."""
    s = np.asarray(estimate_samples, dtype=np.float64)
    se = s.std(ddof=1) / np.sqrt(len(s))
    return abs(s.mean() - value) <= k * se + 1e-12


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _train_bundled(name, out):
    from fmx import cli

    cfg = cli._apply_overrides(cli.load_config(CONFIG_DIR / name), out=out)
    cli.cmd_train(cfg, log=lambda *_: None)
    return out


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    """The bundled unsupervised synthetic run, trained once per session."""
    return _train_bundled("synthetic.json", tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="session")
def synthetic_semi_run(tmp_path_factory):
    """The bundled run with 40% labels on block 1."""
    return _train_bundled("synthetic_semi.json", tmp_path_factory.mktemp("synthetic_semi"))
