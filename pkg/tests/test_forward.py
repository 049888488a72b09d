import numpy as np
import pytest

from qrecon.assembly import assemble_mass, assemble_stiffness, norm
from qrecon.experiments import make_case
from qrecon.forward import ConvergenceError, ForwardProblem, residual, solve_forward, solve_linearized
from qrecon.mesh import FeFunction, build_mesh, interpolate

from conftest import observed_orders

PI = np.pi


def test_poisson_sine_second_order():
    errs, hs = [], []
    for n in (16, 32, 64, 128):
        mesh = build_mesh(1, n)
        u, rep = solve_forward(ForwardProblem(mesh, f=lambda x: PI**2 * np.sin(PI * x)))
        assert rep.iterations == 1 and rep.converged
        errs.append(norm(u, "L2", reference=lambda x: np.sin(PI * x)))
        hs.append(mesh.h)
    np.testing.assert_allclose(observed_orders(errs, hs), 2.0, atol=0.1)


@pytest.mark.parametrize("m", [1, 3])
def test_zero_load_gives_zero_state(m):
    mesh = build_mesh(2, 5)
    u, rep = solve_forward(ForwardProblem(mesh, f=0.0, q=1.0, m=m))
    assert np.all(u.values == 0.0)
    assert rep.iterations <= 1 and rep.converged


@pytest.mark.parametrize("name,ns", [("cubic", (16, 32, 64, 128)), ("b3", (8, 16, 32, 64))])
def test_cubic_manufactured_rates_and_quadratic_newton(name, ns):
    case = make_case(name)
    errs, e1, hs = [], [], []
    for n in ns:
        mesh = build_mesh(case.dim, n)
        u, rep = solve_forward(case.forward_problem(mesh))
        r = np.array(rep.residual_history)
        assert np.all(np.diff(r) < 0)
        # terminal phase r_{k+1} <= C r_k^2 on relative residuals, down to the
        # round-off floor; a linearly convergent iteration would violate it
        tail = r[-3:] / r[0]
        assert np.all(tail[1:] <= np.maximum(10.0 * tail[:-1] ** 2, 1e-10))
        errs.append(norm(u, "L2", reference=case.u_exact))
        e1.append(norm(u, "H1", reference=case.u_exact, reference_grad=case.u_grad))
        hs.append(mesh.h)
    np.testing.assert_allclose(observed_orders(errs, hs), 2.0, atol=0.1)
    np.testing.assert_allclose(observed_orders(e1, hs), 1.0, atol=0.1)


@pytest.mark.parametrize("m", [1, 3, 5])
def test_residual_and_boundary(m):
    mesh = build_mesh(2, 8)
    p = ForwardProblem(mesh, f=lambda x, y: 10 * (1 + x), q=lambda x, y: 1 + y, m=m)
    u, rep = solve_forward(p)
    F = p.load.copy()
    F[mesh.boundary_nodes] = 0.0
    assert np.linalg.norm(residual(p, u)) <= 1e-10 * np.linalg.norm(F)
    assert np.all(u.values[mesh.boundary_nodes] == 0.0)


def test_warm_start_gives_same_state():
    case = make_case("a3")
    mesh = build_mesh(1, 64)
    p = case.forward_problem(mesh)
    u, rep = solve_forward(p)
    u2, rep2 = solve_forward(p, u0=u.values * 1.01)
    assert rep2.iterations < rep.iterations
    np.testing.assert_allclose(u2.values, u.values, atol=1e-12)


def test_invalid_inputs():
    mesh = build_mesh(1, 8)
    with pytest.raises(ValueError):
        ForwardProblem(mesh, m=2)
    with pytest.raises(ValueError):
        ForwardProblem(mesh, m=0)
    with pytest.raises(ValueError):
        solve_forward(ForwardProblem(mesh, q=-1.0))
    with pytest.raises(ValueError):
        solve_forward(ForwardProblem(mesh), tol=0.0)


def test_iteration_budget_exhaustion_raises():
    mesh = build_mesh(1, 32)
    p = ForwardProblem(mesh, f=1e4, q=1.0, m=5)
    with pytest.raises(ConvergenceError) as info:
        solve_forward(p, max_iter=2)
    assert info.value.report.iterations == 2
    assert not info.value.report.converged


# --- linearised solves --------------------------------------------------

def test_linearized_m1_independent_of_linearisation_point(rng):
    mesh = build_mesh(2, 6)
    p = ForwardProblem(mesh, q=lambda x, y: 1 + x, m=1)
    b = rng.standard_normal(mesh.n_vertices)
    z1 = solve_linearized(p, np.zeros(mesh.n_vertices), b)
    z2 = solve_linearized(p, rng.standard_normal(mesh.n_vertices), b)
    np.testing.assert_allclose(z1.values, z2.values, atol=1e-14)
    A = assemble_stiffness(mesh) + assemble_mass(mesh, lambda x, y: 1 + x, degree=3)
    idx = mesh.interior_nodes
    res = (A @ z1.values - b)[idx]
    assert np.linalg.norm(res) <= 1e-12 * np.linalg.norm(b[idx]) * 10


def test_linearized_zero_rhs(rng):
    mesh = build_mesh(1, 10)
    p = ForwardProblem(mesh, q=2.0, m=3)
    z = solve_linearized(p, rng.standard_normal(11), np.zeros(11))
    assert np.all(z.values == 0.0)


def test_linearized_symmetry(rng):
    mesh = build_mesh(2, 7)
    p = ForwardProblem(mesh, q=1.5, m=3)
    u = interpolate(mesh, lambda x, y: np.sin(PI * x) * y, zero_trace=True)
    for _ in range(5):
        a, b = rng.standard_normal((2, mesh.n_vertices))
        a[mesh.boundary_nodes] = 0.0
        b[mesh.boundary_nodes] = 0.0
        za, zb = solve_linearized(p, u, a), solve_linearized(p, u, b)
        assert za.values @ b == pytest.approx(a @ zb.values, rel=1e-10)


# --- maximum and comparison principles --------------------------------

def _random_instance(rng, dim):
    n = int(rng.integers(3, 12 if dim == 2 else 40))
    mesh = build_mesh(dim, n)
    f = FeFunction(mesh, rng.uniform(0, 5, mesh.n_vertices) * (rng.uniform(size=mesh.n_vertices) < 0.7))
    q = FeFunction(mesh, rng.uniform(0, 2, mesh.n_vertices))
    m = int(rng.choice([1, 3]))
    return mesh, f, q, m


def test_discrete_maximum_principle(rng):
    for k in range(100):
        mesh, f, q, m = _random_instance(rng, 1 + k % 2)
        u, _ = solve_forward(ForwardProblem(mesh, f=f, q=q, m=m))
        assert u.values.min() >= -1e-10


def test_discrete_comparison_principle(rng):
    for k in range(100):
        mesh, f2, q, m = _random_instance(rng, 1 + k % 2)
        f1 = FeFunction(mesh, f2.values + rng.uniform(0, 3, mesh.n_vertices))
        u1, _ = solve_forward(ForwardProblem(mesh, f=f1, q=q, m=m))
        u2, _ = solve_forward(ForwardProblem(mesh, f=f2, q=q, m=m))
        assert np.all(u1.values >= u2.values - 1e-10)


def test_uniform_boundedness(rng, case_a):
    ns = (8, 16, 32, 64, 128)
    peaks = np.zeros(len(ns))
    for _ in range(50):
        c = rng.standard_normal(3)
        q = lambda x, c=c: np.clip(1 + c[0] * np.sin(PI * x) + c[1] * np.cos(3 * PI * x) + c[2] * x, 0, 2)
        for i, n in enumerate(ns):
            u, _ = solve_forward(ForwardProblem(build_mesh(1, n), f=case_a.f, q=q))
            peaks[i] = max(peaks[i], u.values.max())
    assert peaks.max() <= 1.1 * peaks.min()
