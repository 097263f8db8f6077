import numpy as np
import pytest

from afttest.data import CONTINUOUS, BINARY, SurvivalDataset, ingest_table, load_pbc
from afttest.formula import parse_formula

M1 = "Surv(time, status) ~ bili + protime + albumin + age + edema + trt"
M2 = "Surv(time, status) ~ log(bili) + protime + albumin + age + edema + trt"


def random_dataset(rng, n, p, censor=0.3, binary_last=False):
    z = rng.uniform(size=(n, p))
    kinds = [CONTINUOUS] * p
    if binary_last and p > 1:
        z[:, -1] = rng.integers(0, 2, size=n)
        z[0, -1], z[1, -1] = 0.0, 1.0
        kinds[-1] = BINARY
    t = np.exp(-z.sum(axis=1) + rng.standard_normal(n))
    status = (rng.uniform(size=n) > censor).astype(float)
    status[0] = 1.0
    return SurvivalDataset(t, status, z, tuple(f"z{q + 1}" for q in range(p)), tuple(kinds))


@pytest.fixture(scope="session")
def pbc_table():
    return load_pbc()


@pytest.fixture(scope="session")
def pbc_m1(pbc_table):
    spec = parse_formula(M1)
    return spec, ingest_table(pbc_table, spec, standardize=True)


@pytest.fixture(scope="session")
def pbc_m2(pbc_table):
    spec = parse_formula(M2)
    return spec, ingest_table(pbc_table, spec, standardize=True)
