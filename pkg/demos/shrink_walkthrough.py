"""How a few dead coefficients turn into removed channels.

A three-layer chain where one output channel of the first layer has no
incoming weights and one input channel of the last layer is never read.
Propagation spreads both facts through the middle layer; shrinking then
slices the tensors and the outputs stay the same.

    python demos/shrink_walkthrough.py
"""

import numpy as np

from kernelshare.graph import Network, forward
from kernelshare.layers import DecomposedConv, GlobalAvgPool, Linear, ReLU
from kernelshare.shrink import propagate, shrink

rng = np.random.default_rng(3)


def layer(c_out, c_in):
    basis = np.linalg.qr(rng.standard_normal((9, 9)))[0][:4]
    return DecomposedConv(basis, rng.standard_normal((c_out, c_in, 4)), np.zeros(c_out), 1, 1)


first, middle, last = layer(6, 3), layer(6, 6), layer(4, 6)
first.coeffs[2] = 0          # channel 2 has no producer
last.coeffs[:, 4] = 0        # channel 4 of the middle output has no consumer
last.coeffs[:, :, 1] = 0     # basis kernel 1 of the last layer is unused
for l in (first, last):
    l.mask = l.coeffs != 0

net = Network([first, ReLU(), middle, ReLU(), last, ReLU(), GlobalAvgPool(),
               Linear(rng.standard_normal((3, 4)), np.zeros(3))], (3, 8, 8), 3)

zeroed, report = propagate(net)
print(f"fixpoint after {report.iterations_to_fixpoint} passes")
for key, r in report.layers.items():
    print(f"  {key}: P_in={sorted(r.P_in)} P_out={sorted(r.P_out)} dead basis={r.dead_basis}")

small, rows = shrink(zeroed, report)
for r in rows:
    print(f"  {r.layer}: width {r.width_before} -> {r.width_after}, d {r.d_before} -> {r.d_after}")

x = rng.standard_normal((2, 3, 8, 8))
print("max output change:", float(np.max(np.abs(forward(net, x)[0] - forward(small, x)[0]))))
