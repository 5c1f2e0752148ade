"""Replication oracles beyond the acceptance list; they reuse the session fixtures."""
import numpy as np
import pytest

from conftest import COVERAGE_R
from isal_fragility.benchlab import coverage_probability, fragility_ci_from_asymptotics
from isal_fragility.inference import SingularHessian, combine_runs
from isal_fragility.model import fragility_prob

pytestmark = pytest.mark.slow


def test_combined_ellipsoid_coverage(synthetic_isal_runs, synthetic_study):
    runs = synthetic_isal_runs
    ells = []
    for j in range(100):
        try:
            ells.append(combine_runs(runs[2 * j].prefix(300), runs[2 * j + 1].prefix(300))[2](0.9))
        except SingularHessian:
            ells.append(None)
    cp = coverage_probability(ells, synthetic_study.case.theta_star)
    assert 0.8 <= cp.cp <= 0.97, cp


def test_bootstrap_coverage(synthetic_study, synthetic_bootstrap):
    ells = [None if bt is None else bt.ellipsoid(0.9) for bt in synthetic_bootstrap]
    cp = coverage_probability(ells, synthetic_study.case.theta_star)
    assert cp.n_used + cp.n_missing == COVERAGE_R
    assert 0.8 <= cp.cp <= 0.97, cp


def test_fragility_band_covers_truth(synthetic_study):
    case = synthetic_study.case
    m = case.marginal
    grid = np.linspace(m.mean - 2 * m.std, m.mean + 2 * m.std, 41)
    truth = fragility_prob(case.theta_star, grid)
    inside = []
    for o in synthetic_study.outcomes[:50]:
        pack = o.result.packs[("ISAL", 200)]
        if pack is None:
            continue
        _, lo, hi = fragility_ci_from_asymptotics(pack.theta, pack, 200, grid, rng=o.seed)
        inside.append(np.mean((lo <= truth) & (truth <= hi)))
    assert np.mean(inside) >= 0.8
