"""Exact and estimated mutual information: DPI, KSG and the InfoNCE bound.

    python3 demos/information_tour.py
"""

import numpy as np

from infogeo.infolab import (ChainSpec, binary_symmetric, dpi_check, gaussian_mi, knn_mi,
                             nce_bound_check)

# two binary symmetric channels in series lose information at every stage
rep = dpi_check(ChainSpec([0.5, 0.5], [binary_symmetric(0.1), binary_symmetric(0.1)]))
print(f"I(X;Y) = {rep.mi_head_mid:.4f} nats, I(X;Z) = {rep.mi_head_tail:.4f} nats")

# KSG against the Gaussian closed form
g = np.random.default_rng(0)
for rho in (0.0, 0.5, 0.9):
    xy = g.multivariate_normal([0, 0], [[1, rho], [rho, 1]], size=2000)
    print(f"rho={rho:.1f}  exact {gaussian_mi(rho):.4f}  ksg {knn_mi(xy[:, 0], xy[:, 1]):.4f}")

# InfoNCE never exceeds ln N, nor (up to sampling noise) the true MI
for rho in (0.0, 0.5, 0.9):
    r = nce_bound_check(rho, batch_size=32, n_batches=200)
    print(f"rho={rho:.1f}  bound {r.bound:.4f}  exact {r.exact_mi:.4f}  ok={r.passed}")
