# %% [markdown]
# # Adjoint gradient against finite differences
#
# The reduced gradient uses one state and one adjoint solve.  Central
# differences in random directions should agree to about 1e-7 relative.

# %%
import numpy as np

from qrecon import InverseProblem, build_mesh, generate_noisy_data, gradient, make_case, objective

case = make_case("a")
mesh = build_mesh(1, 64)
delta = mesh.h**2
ip = InverseProblem(case.forward_problem(mesh, q=0.0), generate_noisy_data(case, mesh, delta, 0), 1e-2 * delta**2)

rng = np.random.default_rng(0)
q = rng.uniform(0.5, 1.5, mesh.n_vertices)
J, u = objective(ip, q)
g = gradient(ip, q, u)
for _ in range(5):
    d = rng.standard_normal(q.size)
    eps = 1e-4
    fd = (objective(ip, q + eps * d)[0] - objective(ip, q - eps * d)[0]) / (2 * eps)
    print(f"adjoint {g @ d:+.10e}   differences {fd:+.10e}   rel {abs(g @ d - fd) / abs(fd):.1e}")
