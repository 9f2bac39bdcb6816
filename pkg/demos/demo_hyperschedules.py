"""Render the four per-position noise-level patterns side by side.

Each matrix has one row per generation step and one column per position;
the printed digit is the noise level.  Quench is the autoregressive
extreme (one position resolved per step), flat is conventional diffusion
(all positions share one level), block and slide anneal a width-omega
window across the sequence.
"""

from fractions import Fraction

from tokendiff import build, generation_rate, partition_at, window_width

D = 12


def render(hs, label):
    print(f"== {label}: T={hs.T}, window width={window_width(hs)}, "
          f"rate d/T={generation_rate(hs)}")
    for t, row in enumerate(hs.tau):
        print(f"  t={t:2d}  " + "".join(str(int(v)) for v in row))
    print()


render(build("quench", D, 1), "quench (AR)")
render(build("flat", D, 4), "flat, 4 levels")
render(build("block", D, 4, omega=4), "block, omega=4")
render(build("slide", D, 4, omega=4), "slide, omega=4")

hs = build("block", D, 4, omega=4)
print("settled/active/worthless split of the block schedule:")
for t in range(hs.T):
    p = partition_at(hs, t)
    line = ["S"] * p.settled_end + ["A"] * p.num_active + ["."] * len(p.worthless)
    print(f"  t={t:2d}  " + "".join(line))

print("\nrate knob: the same block pattern at rho=2 (quick draft) "
      "halves the step count:")
fast = build("block", D, 4, omega=4, rho=2)
print(f"  T goes {hs.T} -> {fast.T}; rate {generation_rate(hs)} -> {generation_rate(fast)}")
slow = build("slide", D, 4, omega=4, rho=Fraction(1, 2))
print(f"  slide at rho=1/2 (think hard): T={slow.T}, rate {generation_rate(slow)}")
