from types import SimpleNamespace

import numpy as np
import pytest

from qrecon.experiments import make_case
from qrecon.mesh import FeFunction, build_mesh, interpolate
from qrecon.stability import (
    check_lower_bound,
    distance_to_boundary,
    prolongate,
    scan_stability,
    theory_gamma,
    verify_identity_mB,
    write_samples_csv,
)
from qrecon.forward import ForwardProblem, solve_forward

PI = np.pi
UNIT_LOAD = SimpleNamespace(dim=1, f=1.0, m=1, sigma=1.0)


def test_distance_to_boundary():
    d1 = distance_to_boundary(build_mesh(1, 4))
    np.testing.assert_allclose(d1, [0, 0.25, 0.5, 0.25, 0])
    d2 = distance_to_boundary(build_mesh(2, 4)).reshape(5, 5)
    assert d2[2, 2] == 0.5 and d2[1, 2] == 0.25 and d2[0].max() == 0


def test_theory_gamma():
    assert theory_gamma(1) == 2.0
    assert theory_gamma(3) == 2.5
    assert theory_gamma(5) == 2.25


def test_lower_bound_unit_load():
    # u = x(1-x)/2 and rho**2 <= x(1-x)/2 * 2, so the ratio is >= 1/2
    ok, worst = check_lower_bound(UNIT_LOAD, 0.0, 2.0, 64)
    assert ok and worst == pytest.approx(0.5, rel=1e-2)


@pytest.mark.parametrize("n", [32, 64, 128])
def test_lower_bound_case_a(n):
    ok, worst = check_lower_bound(make_case("a"), make_case("a").q_exact, 2.0, n)
    assert ok and worst > 3.9


def test_lower_bound_case_b():
    c = make_case("b")
    ok, worst = check_lower_bound(c, c.q_exact, 2.0, 32)
    assert ok and worst > 3.5


def test_small_gamma_fails_and_decays():
    c = make_case("a")
    worst = [check_lower_bound(c, c.q_exact, 0.5, n)[1] for n in (64, 256, 1024)]
    assert worst[0] > worst[1] > worst[2]
    assert not check_lower_bound(c, c.q_exact, 0.5, 1024, threshold=0.25)[0]


def test_large_gamma_passes():
    c = make_case("a")
    ok, worst = check_lower_bound(c, c.q_exact, 4.0, 128)
    assert ok and worst >= 15.9


def test_comparison_along_monotone_family():
    # u(q_t) decreases pointwise as t increases
    c = make_case("a")
    mesh = build_mesh(1, 64)
    prev = None
    for t in np.linspace(0.0, 2.0, 5):
        u, _ = solve_forward(ForwardProblem(mesh, f=c.f, q=lambda x, t=t: t * c.q_exact(x) / 1.5))
        if prev is not None:
            assert np.all(u.values <= prev + 1e-13)
        prev = u.values


@pytest.mark.parametrize("dim", [1, 2])
def test_prolongation_reproduces_linear(dim):
    f = (lambda x: 2 * x - 0.3) if dim == 1 else (lambda x, y: 0.5 + x - 3 * y)
    coarse, fine = build_mesh(dim, 4), build_mesh(dim, 12)
    p = prolongate(interpolate(coarse, f), fine)
    np.testing.assert_allclose(p.values, interpolate(fine, f).values, atol=1e-13)


def test_prolongation_is_nested_2d(rng):
    coarse, fine = build_mesh(2, 4), build_mesh(2, 8)
    fc = FeFunction(coarse, rng.standard_normal(coarse.n_vertices))
    fine_vals = prolongate(fc, fine).values.reshape(9, 9)
    np.testing.assert_allclose(fine_vals[::2, ::2], fc.values.reshape(5, 5), atol=1e-14)


def test_scan_guards():
    c = make_case("a")
    with pytest.raises(ValueError, match="n_samples"):
        scan_stability(c, 5, 0, 128)
    with pytest.raises(ValueError, match="10\\*h"):
        scan_stability(c, 10, 0, 8, coarse_n_sub=8)


def test_scan_1d_fit(tmp_path):
    c = make_case("a")
    fit = scan_stability(c, 16, 0, 256)
    assert fit.kappa_theory == 4.0 and fit.exponent_theory == pytest.approx(0.2)
    assert fit.n_samples == 16 and len(fit.samples) == 16
    assert 0 < fit.constant_fitted < 10 and fit.constant_fitted == fit.max_ratio
    for s in fit.samples:
        q = s.q.values
        assert q.min() >= 0 and q.max() <= 2
        assert s.misfit_coeff_Hm1 <= s.misfit_coeff_L2 * (1 + 1e-8)
    path = write_samples_csv(fit.samples, tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "index,amplitude,misfit_state,misfit_coeff_L2,ratio" and len(lines) == 17


def test_scan_is_reproducible():
    c = make_case("a")
    a = scan_stability(c, 10, 3, 128)
    b = scan_stability(c, 10, 3, 128)
    assert a.constant_fitted == b.constant_fitted


@pytest.mark.slow
def test_scan_constant_stable_under_refinement():
    c = make_case("a")
    c256 = scan_stability(c, 50, 0, 256).constant_fitted
    c512 = scan_stability(c, 50, 0, 512).constant_fitted
    assert abs(c512 - c256) <= 0.1 * c256


@pytest.mark.parametrize("m", [1, 3, 5, 7])
def test_identity(m):
    assert verify_identity_mB(m)


def test_identity_rejects_even():
    with pytest.raises(ValueError):
        verify_identity_mB(2)


def test_misfit_grows_along_monotone_family():
    c = make_case("a")
    mesh = build_mesh(1, 256)
    u_ref, _ = solve_forward(c.forward_problem(mesh))
    bump = lambda x: 0.5 * np.sin(PI * x)
    misfits = []
    for t in (0.1, 0.2, 0.3, 0.4, 0.5):
        q = lambda x, t=t: c.q_exact(x) + t * bump(x)
        u, _ = solve_forward(c.forward_problem(mesh, q=q))
        misfits.append(float(np.sqrt((u.values - u_ref.values) @ (u.values - u_ref.values))))
    assert all(b > a for a, b in zip(misfits, misfits[1:]))
