# %% [markdown]
# # Convergence study in one dimension
#
# Noise level delta = h**2 and regularisation alpha = 1e-2 delta**2 are tied
# to the mesh.  Errors are medians over five noise seeds; the state error
# should shrink like delta and the coefficient error roughly like
# sqrt(delta).  Takes about ten seconds.

# %%
from qrecon import emit_report, make_case, run_study

records = run_study(make_case("a"), [64, 128, 256, 512])
print(emit_report(records, "text", "study_a.txt").read_text())

# %% [markdown]
# A single reconstruction, for a look at the recovered coefficient.

# %%
import numpy as np

from qrecon import reconstruct

res, e_u, e_q, h, delta, alpha = reconstruct(make_case("a"), 64, seed=0)
print(res.message, res.iterations, f"e_u={e_u:.3e} e_q={e_q:.3e}")
x = res.q_opt.mesh.vertices[:, 0]
for xi, qi in list(zip(x, res.q_opt.values))[::8]:
    print(f"x={xi:.3f}  q_opt={qi:.4f}  q_exact={1 + 0.5 * np.sin(np.pi * xi):.4f}")
