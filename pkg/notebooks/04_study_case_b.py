# %% [markdown]
# # Convergence study on the unit square
#
# Same coupling with c = 5 and three seeds.  The coarsest row is dominated
# by the penalty: the converged minimizer sits near a constant coefficient,
# so its errors are larger than in the reference table (see README).
# Takes about fifteen seconds.

# %%
from qrecon import emit_report, make_case, run_study

records = run_study(make_case("b"), [10, 22, 34, 50], seeds=range(3))
print(emit_report(records, "text", "study_b.txt").read_text())
