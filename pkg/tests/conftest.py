import math

import numpy as np
import pytest
from hypothesis import settings

from fairembed.synthetic import HierarchicalGaussianParams

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_params(d=4, gamma=0.5, beta=0.01, alpha=0.5, n_a=20, n_b=20, m=3, seed=0, sigma_b=None):
    mu = np.ones(d) / math.sqrt(d)
    sb = np.linspace(1.0, 0.3, d) if sigma_b is None else np.asarray(sigma_b, dtype=float)
    return HierarchicalGaussianParams(d=d, gamma=gamma, beta=beta, alpha=alpha, mu_a=mu, sigma_b_diag=sb,
                                      n_identities_a=n_a, n_identities_b=n_b, m=m, seed=seed)


def default_params(gamma=0.01, seed=1, d=20, n=500, m=10):
    """The desk-scale synthetic scenario: Sigma_a = 0.3 * 0.8**i fixed, Sigma_b = Sigma_a / gamma."""
    sa = 0.3 * 0.8 ** np.arange(d)
    return HierarchicalGaussianParams(d=d, gamma=gamma, beta=0.01, alpha=0.5, mu_a=np.ones(d) / math.sqrt(d),
                                      sigma_b_diag=sa / gamma, n_identities_a=n, n_identities_b=n, m=m,
                                      seed=seed)


@pytest.fixture
def small_params():
    return make_params()


SMALL_CONFIG = """
[run]
seed = 7

[model]
d = 6
n_identities_a = 12
n_identities_b = 12
m = 4

[embedder]
k = 2
epochs = 2

[projection]
gammas = [1.0, 0.1]

[bounds]
n_configs = 5
resolution = 0.01

[attack]
max_iters = 30
penalty_bsearch_steps = 1
max_penalty_doublings = 4
n_sources = 3
n_targets_per_source = 1
n_untargeted_sources = 6
untargeted_max_iters = 20
n_taus = 5

[matching]
cap = 2000

[stats]
null_reps = 50
"""


@pytest.fixture
def small_config_path(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_CONFIG)
    return path


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one acceptance verdict; all verdicts are printed in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
