"""Factor a random layer into shared kernels, prune it, and run it two ways.

    python demos/shared_basis.py
"""

import numpy as np

from kernelshare.decompose import decompose_layer, reconstruct
from kernelshare.graph import Network
from kernelshare.layers import DecomposedConv, GlobalAvgPool, Linear
from kernelshare.prune import prune
from kernelshare.runtime import benchmark, compile, count_flops, dense_infer, infer

rng = np.random.default_rng(0)
w = rng.standard_normal((64, 64, 3, 3)).astype(np.float32)

print("d   rel. error of the rank-d reconstruction")
for d in (1, 3, 5, 7, 9):
    basis, coeffs, err2 = decompose_layer(w, d)
    print(f"{d}   {np.sqrt(err2) / np.linalg.norm(w):.4f}")

# random weights spread energy evenly across all nine directions, so a real
# trained layer compresses far better than this; the runtime doesn't care
basis, coeffs, _ = decompose_layer(w, 5)
layer = DecomposedConv(basis, coeffs, np.zeros(64, np.float32), 1, 1)
net = Network([layer, GlobalAvgPool(), Linear(np.eye(64, dtype=np.float32), np.zeros(64, np.float32))],
              (64, 32, 32), 64)
net, report = prune(net, s=1.6)
print(f"\nafter pruning: {report.nnz}/{report.total} coefficients kept ({100 * report.sparsity:.1f}% zero)")

model = compile(net)
x = rng.standard_normal((4, 64, 32, 32)).astype(np.float32)
gap = np.max(np.abs(infer(model, x) - dense_infer(model, x)))
print(f"two-stage vs dense output, max abs difference: {gap:.2e}")

t = count_flops(net).to_dict()["totals"]
print(f"MACs: dense {t['dense_macs']:,}  two-stage {t['two_stage_total']:,}")
result = benchmark(model, batch_size=8, repetitions=10)
print(f"latency: dense {result.variant('dense').median_ms:.1f} ms, "
      f"two-stage {result.variant('two-stage').median_ms:.1f} ms ({result.speedup:.2f}x)")
