# Random Fourier features converge to the Gaussian kernel as the number of bases grows.
import numpy as np

from metakernels.autodiff import Graph
from metakernels.rff import SampledBases, draw_noise, rff_feature_map

rng = np.random.default_rng(0)
d, sigma = 5, 1.5
x, y = rng.standard_normal((200, d)), rng.standard_normal((200, d))
exact = np.exp(-np.sum((x - y) ** 2, axis=1) / (2 * sigma**2))

for D in (100, 1_000, 10_000, 40_000):
    eps, phase = draw_noise(rng, D, d)
    # omega ~ N(0, sigma^-2 I)
    bases = SampledBases(Graph().constant(eps / sigma), phase)
    approx = np.sum(rff_feature_map(x, bases).value * rff_feature_map(y, bases).value, axis=1)
    err = np.abs(approx - exact)
    print(f"D={D:6d}  mean |err| {err.mean():.4f}  max |err| {err.max():.4f}")

# error shrinks roughly like 1/sqrt(D)
