import pytest

from attnlab.kernels import PwlTables
from attnlab.nonlinear import default_ln_table, default_sigmoid_table
from attnlab.tensorio import GenSpec, generate


@pytest.fixture(scope="session")
def sigmoid_table():
    return default_sigmoid_table()


@pytest.fixture(scope="session")
def ln_table():
    return default_ln_table()


@pytest.fixture(scope="session")
def pwl_tables(sigmoid_table, ln_table):
    return PwlTables(sigmoid=sigmoid_table, ln=ln_table)


@pytest.fixture
def make_problem():
    def make(seed, n, d, queries=1, distribution="gaussian", params=(0.0, 1.0)):
        return generate(
            GenSpec(
                seed=seed,
                n_keys=n,
                d=d,
                n_queries=queries,
                distribution=distribution,
                params=tuple(params),
            )
        )

    return make
