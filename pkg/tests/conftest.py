import numpy as np
import pytest

from adprog.cohort import fit_and_apply_normalizer, plan_random_removal, synthesize_cohort
from adprog.model import ProgressionModel, make_batch


def micro_setup(n_subjects=4, T=5, D_mri=6, D_cog=3, H=16, seed=0, missing=0.3, removal=0.2):
    """Small normalized cohort, a freshly initialized model and one batch with removal."""
    raw = synthesize_cohort(n_subjects, T, D_mri, D_cog, missing, seed=seed)
    cohort, _ = fit_and_apply_normalizer(raw)
    model = ProgressionModel(cohort.feature_kinds, hidden=H, seed=seed)
    keep = plan_random_removal(cohort, removal, seed)
    batch = make_batch(cohort.subjects, keep)
    return cohort, model, batch


@pytest.fixture
def micro():
    return micro_setup()


@pytest.fixture(scope="session")
def small_cohort():
    raw = synthesize_cohort(60, 6, 4, 2, 0.2, seed=3)
    cohort, spec = fit_and_apply_normalizer(raw)
    return cohort, spec


def rng(seed=0):
    return np.random.default_rng(seed)


# one line per acceptance criterion, echoed after the test run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
