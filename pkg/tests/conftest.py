import numpy as np
import pytest

from epspec.liouville import CaParams, mhz_to_rad_per_ns

GAMMA_CA = 1.0 / 7.0


def ca_params(split_mhz: float = 200.0, chi: float = 0.065, gamma_deph: float = 0.0, **kw) -> CaParams:
    """Four-level model with the S/P Zeeman ratio 3:1 used throughout the tests."""
    w21 = mhz_to_rad_per_ns(split_mhz)
    return CaParams(GAMMA_CA, chi, omega21=w21, omega43=w21 / 3.0, gamma_deph=gamma_deph, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_hermitian(rng, n: int) -> np.ndarray:
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return 0.5 * (z + z.conj().T)


def random_density(rng, n: int) -> np.ndarray:
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    rho = z @ z.conj().T
    return rho / np.trace(rho)


# One line per acceptance criterion, filled by tests/test_acceptance.py.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
