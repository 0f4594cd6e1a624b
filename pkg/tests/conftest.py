import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def grid_lambda_oracle(eigenvalues, n, step=1e-6, upper=None):
    """Brute-force minimiser of the spectral objective on a uniform grid."""
    mu = np.clip(np.asarray(eigenvalues, dtype=float), 0, None)
    upper = max(1.0, mu.max()) if upper is None else upper
    best_val, best_lam = np.inf, None
    for start in np.arange(step, upper + step, 2e5 * step):
        lam = np.arange(start, min(start + 2e5 * step, upper + step), step)
        vals = ((mu[None, :] / (mu[None, :] + lam[:, None])) ** 2).sum(axis=1) / n + lam
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best_lam = vals[i], lam[i]
    return best_lam


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion; printed at the end of the run."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(label, ok, detail, info=False):
        status = "INFO" if info else ("PASS" if ok else "FAIL")
        line = f"{status} {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
