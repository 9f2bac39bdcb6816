"""Walk through the generator algebra and the closed-form evolution operator.

The absorb generator funnels tokens into MASK, the uniform generator
scatters them over the other real tokens.  Because the two matrices commute
and square to their own negatives, the mixed generator exponentiates in
closed form; this script verifies that against a brute-force Taylor series
and prints how a single token's distribution evolves with noise.
"""

import numpy as np

from tokendiff import evolve_analytic, generator

n = 5  # four real tokens plus MASK

qa = generator("absorb", n).matrix
qu = generator("uniform", n).matrix
print("absorb generator:\n", qa)
print("uniform generator:\n", qu)
print("commutator max |[Qa,Qu]| =", np.abs(qa @ qu - qu @ qa).max())
print("Qa^2 + Qa =", np.abs(qa @ qa + qa).max())
print("Qu^2 + Qu =", np.abs(qu @ qu + qu).max())


def expm_taylor(q, delta, terms=60):
    out = np.eye(q.shape[0])
    term = np.eye(q.shape[0])
    for k in range(1, terms + 1):
        term = term @ (delta * q) / k
        out = out + term
    return out


gamma = 0.25
print(f"\nmixed generator at gamma={gamma}: operator vs Taylor series")
for delta in (0.1, 1.0, 5.0):
    analytic = evolve_analytic(n, gamma, delta).matrix
    series = expm_taylor((1 - gamma) * qa + gamma * qu, delta)
    print(f"  delta={delta:4.1f}  max abs err = {np.abs(analytic - series).max():.2e}")

print("\ndistribution of a token starting as id 0 (columns: delta)")
deltas = [0.0, 0.25, 1.0, 3.0, 10.0]
cols = np.stack([evolve_analytic(n, gamma, d).matrix[:, 0] for d in deltas], axis=1)
labels = [f"token {i}" for i in range(n - 1)] + ["MASK"]
header = "          " + "  ".join(f"d={d:<5g}" for d in deltas)
print(header)
for label, row in zip(labels, cols):
    print(f"{label:>9s} " + "  ".join(f"{v:7.4f}" for v in row))
print("\nMASK mass grows like 1 - exp(-(1-gamma) delta); a small uniform "
      "component keeps real-token swaps alive, which is what lets a trained "
      "denoiser revise earlier choices.")
