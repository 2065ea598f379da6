import numpy as np
import pytest
import torch

from attenmfg.core_model import (
    EconomicParams,
    Instance,
    MachineSpec,
    ScenarioSet,
    SurvivalParams,
    config_from_name,
    generate_instance,
)

torch.set_num_threads(1)


def make_instance(failure, dmc, demand, *, limit=10.0, sites=None, cf=50.0, idle=1.0,
                  demand_pen=2.0, travel=0.0, J=1, n_sites=None) -> Instance:
    """Hand-built instance; ``failure`` is (S, M), ``dmc``/``demand`` are (M, T)."""
    failure = np.asarray(failure, dtype=np.int64)
    dmc = np.asarray(dmc, dtype=float)
    demand = np.asarray(demand, dtype=float)
    S, M = failure.shape
    T = dmc.shape[1]
    sites = list(sites) if sites is not None else [1] * M
    limits = np.broadcast_to(np.asarray(limit, dtype=float), (S, M, T)).copy()
    cfs = np.broadcast_to(np.asarray(cf, dtype=float), (M,))
    machines = tuple(
        MachineSpec(i, sites[i], 1.0, float(cfs[i]), SurvivalParams(2.0, 5.0), 10.0) for i in range(M)
    )
    return Instance(
        n_sites=n_sites or max(sites),
        horizon=T,
        economics=EconomicParams(idle, demand_pen, travel, J),
        machines=machines,
        scenarios=ScenarioSet(failure, limits),
        demand=demand,
        dmc=dmc,
    )


@pytest.fixture
def desk_instance():
    return generate_instance(config_from_name("D_L2P4M6_J2", seed=5))


def random_instances(n, seed=0, names=("D_L2P4M6_J2", "D_L3P5M8_J2", "LRP3M4", "L2P3M5_J2")):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        name = names[i % len(names)]
        out.append(generate_instance(config_from_name(name, seed=int(rng.integers(2**31)))))
    return out


# PASS/FAIL lines recorded by the acceptance suite, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
