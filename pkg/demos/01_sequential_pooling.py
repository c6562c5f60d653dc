"""How the SwishRNN recurrence pools a sequence.

The cell c[i] = Swish(c[i-k] - x[i]) + x[i] behaves like a soft max(c, x):
when the carried state is far above the input it survives, when it is far
below the input gets through. With step size k the sequence splits into k
chains that advance together, so a length-l scan needs ceil(l/k) steps.
"""

import numpy as np

from swishbert.layers import swish, swishrnn_scan
from swishbert.numerics import Tensor

ONE, ZERO = Tensor(np.ones(1)), Tensor(np.zeros(1))


def scan(values, k=1):
    return swishrnn_scan(Tensor(np.array(values, float)[:, None]), ONE, ZERO, k).data[:, 0]


print("soft running max with k=1")
x = [0.0, 3.0, -2.0, -2.0, 5.0, 1.0]
print("  input ", np.round(x, 3))
print("  state ", np.round(scan(x), 3))
print("  max   ", np.maximum.accumulate(x))

print("\nsame input with k=2: even and odd positions pool separately")
print("  state ", np.round(scan(x, 2), 3))
print("  evens ", np.round(scan(x[0::2]), 3), " odds", np.round(scan(x[1::2]), 3))

def cell(c, x):
    """One update with the state c carried in and input x."""
    return float(swish(Tensor(np.array([[c - x]])), ONE, ZERO).data[0, 0]) + x


print("\nsaturation at large gaps (the cell picks max(c, x) almost exactly)")
for gap in (1, 5, 10, 30):
    print(f"  gap {gap:>2}: cell(c={gap}, x=0) = {cell(gap, 0.0):.6f}, cell(c=0, x={gap}) = {cell(0.0, gap):.6f}")

rng = np.random.default_rng(0)
long = rng.standard_normal((4096, 1))
steps = {k: -(-len(long) // k) for k in (1, 2, 4)}
print("\nsequential steps for l=4096:", steps)
