import numpy as np
import pytest

from resonflow.atommodel import AtomSpec, default_params, two_level_atom
from resonflow.cli import RunConfig, build_problem
from resonflow.feshbach import FeshbachPair
from resonflow.fockspace import build_basis, build_grid
from resonflow.rgflow import ScaleSchedule


def small_problem(lambda0=3e-3, vartheta=np.pi / 8, coupling="sigma_x", i0=None, p=None, n_r=6,
                  e_max_multi=0.3, k_max=2.0):
    """A few hundred states: quick enough for unit tests of the whole pipeline."""
    atom = two_level_atom(1.0, coupling)
    params = default_params(atom, lambda0, vartheta=vartheta, i0=i0, p=p)
    sch = ScaleSchedule.from_params(params)
    grid = build_grid(n_r, 6, k_max, ir_scales=[sch.rho(j) for j in range(3)], uv_panels=1)
    basis = build_basis(grid, 2, k_max, e_max_multi)
    return grid, basis, atom, params


def reference_problem(**params):
    """The reference two-level configuration with parameter overrides."""
    cfg = RunConfig.model_validate({"params": params})
    return build_problem(cfg)


@pytest.fixture(scope="session")
def small():
    return small_problem()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


def three_level_atom(d12=1.0, d13=1.0, d23=1.0):
    d = np.zeros((3, 3), complex)
    d[0, 1] = d[1, 0] = d12
    d[0, 2] = d[2, 0] = d13
    d[1, 2] = d[2, 1] = d23
    nrm = np.linalg.norm(d, 2)
    if nrm > 0:
        d = d / nrm
    return AtomSpec(np.array([0.0, 0.6, 1.0]), np.stack([d, d, d]))


def smooth_pair(rng, n, hermitian=False, levels=(1.0, 0.6)):
    """Random H with T = diag(H) and a diagonal P taking the values in ``levels`` and 0."""
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    if hermitian:
        A = (A + A.conj().T) / 2
    # spread the diagonal so that T is comfortably invertible on ran Pbar
    H = A / np.sqrt(n) + np.diag(np.linspace(-2, 4, n))
    T = np.diag(np.diag(H))
    k = n // 3
    p = np.zeros(n)
    p[:k] = levels[0]
    p[k:2 * k] = levels[1]
    return FeshbachPair(H, T, np.diag(p))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
