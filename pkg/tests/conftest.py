import os
import tempfile

# run-history store for the suite; must be set before vmiv.db is imported
_DB_DIR = tempfile.mkdtemp(prefix="vmiv-tests-")
os.environ.setdefault("DATABASE_URL", f"sqlite:///{os.path.join(_DB_DIR, 'runs.db')}")
os.environ.setdefault("VMIV_THREADS", "2")

import numpy as np
import pandas as pd
import pytest

from vmiv.simulation import (
    dgp_three_instruments,
    simulate,
    three_instrument_spec,
    two_instrument_spec,
)
from vmiv.estimation import replicate_rng


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def dgp1():
    return three_instrument_spec(1)


@pytest.fixture(scope="session")
def dgp2():
    return three_instrument_spec(2)


@pytest.fixture(scope="session")
def dgp_two():
    return two_instrument_spec()


@pytest.fixture(scope="session")
def dgp1_sample():
    data, labels = dgp_three_instruments(1, 2000, seed=7)
    return data, labels


def frame_of(data, prefix="z"):
    cols = {"y": data.Y, "d": data.D.astype(int)}
    for j in range(data.J):
        cols[f"{prefix}{j + 1}"] = data.Z[:, j]
    if data.X is not None:
        for k in range(data.X.shape[1]):
            cols[f"x{k + 1}"] = data.X[:, k]
    return pd.DataFrame(cols)


@pytest.fixture
def dgp1_csv(tmp_path, dgp1_sample):
    data, _ = dgp1_sample
    path = tmp_path / "dgp1.csv"
    frame_of(data).to_csv(path, index=False)
    return str(path)


@pytest.fixture
def full_support_j4(tmp_path):
    """Four independent fair instruments and a treatment that rises in each."""
    rng = replicate_rng(99, 0)
    n = 3200
    Z = (rng.random((n, 4)) < 0.5).astype(int)
    p = 0.1 + 0.2 * Z.sum(axis=1)
    D = (rng.random(n) < p).astype(int)
    Y = 1.0 + 2.0 * D + rng.standard_normal(n)
    df = pd.DataFrame({"y": Y, "d": D, **{f"z{j + 1}": Z[:, j] for j in range(4)}})
    path = tmp_path / "j4.csv"
    df.to_csv(path, index=False)
    return str(path)


@pytest.fixture
def weak_csv(tmp_path):
    """Treatment identical in distribution across instrument cells."""
    cells = np.repeat(np.arange(4), 50)
    D = np.tile([0, 1], 100)
    Y = D * 1.0 + np.tile(np.linspace(0.0, 1.0, 50), 4)
    df = pd.DataFrame({"y": Y, "d": D, "z1": cells & 1, "z2": (cells >> 1) & 1})
    path = tmp_path / "weak.csv"
    df.to_csv(path, index=False)
    return str(path)


@pytest.fixture
def complier_only_dgp():
    """Only complier groups for J=2, bounded outcomes."""
    from vmiv.combinatorics import group_index
    from vmiv.simulation import BernoulliLaw, DGPSpec

    index = group_index(2)
    probs = [0.0] * len(index)
    effects = [0.0] * len(index)
    for fam, eff in (((1,), 1.0), ((1, 2), 2.0), ((2,), 3.0), ((3,), 4.0)):
        probs[index[fam]] = 0.25
        effects[index[fam]] = eff
    return DGPSpec(2, tuple(probs), BernoulliLaw((0.5, 0.5)), tuple(effects), tuple([1.0] * len(index)), 1.0)


@pytest.fixture
def simulate_fn():
    return simulate
