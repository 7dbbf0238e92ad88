import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resonflow.atommodel import AtomSpec, default_params, two_level_atom
from resonflow.fockspace import build_grid, direction_rule, polarizations
from resonflow.resonance import (calibrate_remainder_constant, fgr_condition, grid_directions, im_zod_residue,
                                 leading_feshbach, leading_params, pole_radius, remainder_budget, width_certificate,
                                 zd_zod)
from resonflow.rgflow import run_flow

from conftest import small_problem

R_POLE = np.sqrt(3.0) - 1.0


@pytest.fixture(scope="module")
def fine_grid():
    return build_grid(200, 6, 8.0, uv_panels=4)


def test_pole_two_level():
    assert abs(pole_radius(1.0, 1.0) - R_POLE) < 1e-12
    atom = two_level_atom()
    from resonflow.resonance import pole_radii
    radii = pole_radii(atom, default_params(atom, 1e-3, p=np.zeros(3)))
    assert len(radii) == 1 and np.allclose(radii[0], R_POLE, atol=1e-12)
    # the root solves E_i0 - r - r^2/2 + r p.khat = E_j
    c = np.array([0.4, 1.0, 1.6])
    r = pole_radius(0.7, c)
    assert np.allclose(r * r / 2 + c * r, 0.7, atol=1e-14) and np.all(r > 0)


@pytest.mark.parametrize("n_dir", [6, 14, 26])
def test_angular_sum_rule(n_dir):
    d, w = direction_rule(n_dir)
    e1, e2 = polarizations(d)
    dhat = np.array([1.0, 2.0, -2.0]) / 3.0
    total = np.sum(w * ((e1 @ dhat) ** 2 + (e2 @ dhat) ** 2))
    assert np.isclose(total, 8 * np.pi / 3, rtol=1e-13)


def test_residue_closed_form():
    atom = two_level_atom()
    params = default_params(atom, 1e-3, p=np.zeros(3))
    # (eps . d)_{12} = eps . (1, 1, 1); the sum rule gives 3 * 8 pi / 3
    expect = np.pi * 8 * np.pi * R_POLE ** 3 * np.exp(-R_POLE ** 2) / np.sqrt(3)
    assert np.isclose(im_zod_residue(atom, params), expect, rtol=1e-13)


def test_quadrature_matches_residue(fine_grid):
    atom = two_level_atom()
    params = default_params(atom, 1e-3, p=np.zeros(3))
    s = zd_zod(fine_grid, atom, params)
    assert abs(s.z_od.imag - s.im_zod_residue) < 1e-6
    assert s.im_zod_residue > 0


def test_zero_dipoles(small):
    grid = small[0]
    atom = two_level_atom(1.0, "zero")
    params = default_params(atom, 1e-3)
    s = zd_zod(grid, atom, params)
    assert s.z_d == 0 and s.z_od == 0 and s.im_zod_residue == 0
    value, holds = fgr_condition(atom, params)
    assert value == 0 and not holds


def test_ground_level_has_no_channel(fine_grid):
    atom = two_level_atom()
    params = default_params(atom, 1e-3, i0=1)
    assert im_zod_residue(atom, params) == 0.0
    s = zd_zod(fine_grid, atom, params)
    # z_od enters the energy with a minus sign, so a positive real part lowers the ground level
    assert abs(s.z_od.imag) < 1e-8 and s.z_od.real > 0


def test_z_d_real_and_theta_independent(fine_grid):
    atom = two_level_atom(1.0, "sigma_z")
    for vt in (0.3, np.pi / 8, 0.5):
        s = zd_zod(fine_grid, atom, default_params(atom, 1e-3, vartheta=vt))
        assert abs(s.z_d.imag) < 1e-10 and s.z_d.real > 0
        assert abs(s.z_d_rotated - s.z_d) < 1e-6
        # no decay channel in the diagonal coupling
        assert s.im_zod_residue == 0


def test_residue_theta_independent():
    atom = two_level_atom()
    vals = [im_zod_residue(atom, default_params(atom, 1e-3, vartheta=vt)) for vt in (0.2, 0.4, 0.7)]
    assert vals[0] == vals[1] == vals[2]


def test_fgr_kinematic_dependence():
    atom = two_level_atom()
    v0, h0 = fgr_condition(atom, default_params(atom, 1e-3, p=np.zeros(3)))
    v3, h3 = fgr_condition(atom, default_params(atom, 1e-3, p=np.array([0.0, 0.0, 0.3])))
    assert h0 and h3 and v0 > 0 and v3 > 0 and abs(v0 - v3) > 1e-3
    assert np.isclose(v0, im_zod_residue(atom, default_params(atom, 1e-3, p=np.zeros(3))) / np.pi)


def _three_level(d12, d13, d23):
    d = np.zeros((3, 3), complex)
    d[0, 1] = d[1, 0] = d12
    d[0, 2] = d[2, 0] = d13
    d[1, 2] = d[2, 1] = d23
    return AtomSpec(np.array([0.0, 0.6, 1.0]), np.stack([d, d, d]))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.4), st.floats(0.0, 0.4), st.floats(0.01, 0.4))
def test_channel_monotonicity(d13, d23, extra):
    params = default_params(_three_level(0.3, d13, d23), 1e-3, i0=3)
    base = im_zod_residue(_three_level(0.3, d13, d23), params)
    more = im_zod_residue(_three_level(0.3, d13, d23 + extra), params)
    more2 = im_zod_residue(_three_level(0.3, d13 + extra, d23), params)
    assert more >= base and more2 >= base


def test_grid_directions_recover_rule(small):
    grid = small[0]
    d, w = grid_directions(grid)
    assert len(d) == 6 and np.isclose(w.sum(), 4 * np.pi)


# -- leading operator ------------------------------------------------------------


def test_leading_operator_zero_coupling(small):
    grid, basis, atom, params = small
    p0 = params.with_(lambda0=0.0)
    HL, budget, info = leading_feshbach(grid, basis, atom, p0)
    assert budget == 0.0 and info["rho0"] == p0.rho0
    from resonflow.atommodel import free_diagonal
    assert np.allclose(np.diag(HL), 1.0 + free_diagonal(basis, p0.p, p0.theta)[info["sub"]], atol=0)
    assert leading_params(p0) is p0


def test_leading_operator_spectrum_and_resolvent():
    grid, basis, atom, params = small_problem(lambda0=0.02)
    shift = zd_zod(grid, atom, params)
    HL, budget, info = leading_feshbach(grid, basis, atom, params, shift)
    assert info["rho0"] == pytest.approx(0.02 ** 0.8)
    lam2 = params.lambda0 ** 2
    d = np.diag(HL)
    h = basis.h_f[info["sub"]]
    core = h <= 0.75 * info["rho0"]
    assert np.all(d[core].imag <= -lam2 * shift.z_od.imag + 1e-15)
    for im in (-0.5 * lam2 * shift.z_od.imag, 0.0, 1e-3):
        for re in (0.999, 1.0, 1.001):
            z = re + 1j * im
            inv = 1 / np.min(np.abs(d[core] - z))
            assert inv <= 1 / abs(im + lam2 * shift.z_od.imag) * (1 + 1e-12)


def test_remainder_budget_scaling():
    atom = two_level_atom()
    p = default_params(atom, 1e-3)
    b1 = remainder_budget(atom, p, 1.0)
    b2 = remainder_budget(atom, p.with_(lambda0=2e-3), 1.0)
    assert np.isclose(b2 / b1, 2 ** 2.6)
    assert np.isclose(remainder_budget(atom, p, 3.0), 3 * b1)


def test_calibration_is_fitted(small):
    grid, basis, atom, params = small
    cal = calibrate_remainder_constant(grid, basis, atom, params, lambdas=(3e-3, 1e-2))
    assert cal["status"] == "fitted" and cal["C"] == max(cal["ratios"]) and cal["C"] >= 0
    assert len(cal["norms"]) == 2


def test_width_certificate_degenerate_cases(small):
    grid, basis, atom, params = small
    c0 = width_certificate(grid, basis, atom, params.with_(lambda0=0.0))
    assert c0.degenerate and "no width" in c0.notes[0]
    zero = two_level_atom(1.0, "zero")
    cz = width_certificate(grid, basis, zero, params)
    assert cz.degenerate and not cz.fgr_holds and "no width predicted" in cz.notes[0]


def test_width_certificate_fgr_case(small):
    grid, basis, atom, params = small
    rec = run_flow(grid, basis, atom, params, reconstruct=False)
    cert = width_certificate(grid, basis, atom, params, im_z_inf=rec.z_inf.imag)
    assert not cert.degenerate and cert.fgr_holds
    assert cert.threshold < 0 and cert.invertible and cert.resolvent_bound_ok
    assert cert.width_negative
    # Im z_inf + lambda^2 Im z_od is far below lambda^2 Im z_od
    assert cert.deviation < 0.1 * params.lambda0 ** 2 * zd_zod(grid, atom, params).im_zod_residue
