import numpy as np
import pytest

from isal_fragility.benchlab import TooManyDegenerate, bootstrap_mle_cov, synthetic_replication
from isal_fragility.config import preset
from isal_fragility.estimators import WeightedDataset
from isal_fragility.study import pool_for_config, run_study

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}

SYNTH_SEED = 0
SYNTH_R = 200  # full replications (IS-AL, RS, MLE)
SYNTH_PAIRS = 200  # IS-AL pairs for the convergence statistic
COVERAGE_R = 100  # replications used for covariance and coverage checks


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_study():
    """200 replications of all three strategies, checkpoints 120 to 500."""
    cfg = preset("synthetic-paper").replace(sizes=(120, 200, 300, 500), R=SYNTH_R, bootstrap_sizes=(),
                                           seed=SYNTH_SEED)
    return run_study(cfg)


@pytest.fixture(scope="session")
def synthetic_isal_runs(synthetic_study):
    """400 IS-AL trajectories to n = 500: the study's 200 plus 200 IS-AL-only replications."""
    cfg = synthetic_study.cfg
    case = synthetic_study.case
    test = case.test_set(cfg.seed)
    runs = [o.isal["ISAL"] for o in synthetic_study.outcomes]
    for r in range(SYNTH_R, 2 * SYNTH_PAIRS):
        res = synthetic_replication(case, r, cfg.seed, cfg.sizes, epsilon=cfg.epsilons[0], n0=cfg.n0,
                                    grid=cfg.beta_reg_grid, bounds=cfg.param_bounds, test=test,
                                    strategies=("ISAL",), with_packs=False)
        runs.append(res.isal)
    return runs


@pytest.fixture(scope="session")
def synthetic_bootstrap(synthetic_study):
    """MLE bootstrap (B = 200) at n = 500 for the first replications, seeded per replication."""
    cfg = synthetic_study.cfg
    out = []
    for o in synthetic_study.outcomes[:COVERAGE_R]:
        p = o.result.passive
        data = WeightedDataset(p.x[:500], p.s[:500], 1.0, "MLE")
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed + o.index, 2]))
        try:
            out.append(bootstrap_mle_cov(data, 200, cfg.param_bounds, rng, o.result.summaries["MLE"][500].theta))
        except TooManyDegenerate:
            out.append(None)
    return out


@pytest.fixture(scope="session")
def oscillator_study():
    cfg = preset("oscillator-paper").replace(sizes=(100, 120, 200, 300), bootstrap_sizes=(100, 200, 300), R=50)
    pool = pool_for_config(cfg, cfg.seed)
    return run_study(cfg, pool=pool)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
