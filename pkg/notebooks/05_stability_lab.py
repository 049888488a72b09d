# %% [markdown]
# # Stability lab
#
# Three probes of the analysis: the boundary lower bound of the state, the
# Hoelder stability constant, and the factorisation of a**m - b**m.

# %%
from qrecon import make_case
from qrecon.stability import check_lower_bound, scan_stability, verify_identity_mB

case = make_case("a")
for gamma in (0.5, 2.0, 4.0):
    print(f"gamma={gamma}", [f"{check_lower_bound(case, case.q_exact, gamma, n)[1]:.4f}" for n in (64, 256, 1024)])

# %% [markdown]
# With gamma = 2 the minimum ratio is flat under refinement.  A smaller
# exponent makes the ratio vanish at the boundary; a larger one only makes
# the bound easier.

# %%
for fine in (256, 512):
    fit = scan_stability(case, 50, seed=0, fine_n_sub=fine)
    print(f"fine_n_sub={fine} kappa={fit.kappa_theory} exponent={fit.exponent_theory:.3f} C={fit.max_ratio:.4f}")

# %%
print({m: verify_identity_mB(m) for m in (1, 3, 5, 7)})
