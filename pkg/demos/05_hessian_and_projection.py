"""Structure of the incidental-parameter Hessian and the regressor projection.

The Hessian in (alpha, gamma) is singular along (alpha, -gamma), so its
Moore-Penrose pseudoinverse is used.  Its off-diagonal part shrinks as the
panel grows, which is what makes the bias formulas tractable.
"""

import numpy as np

from ifepanel import DgpSpec, Params, build_hessian, dgp_generate, pseudoinverse, wls_projection, xi_residualize

for n in (10, 20, 40):
    spec = DgpSpec("probit_static", n, n, seed=3)
    panel, truth = dgp_generate(spec, rep=0)
    params = Params(truth.beta, truth.alpha, truth.gamma)
    H = build_hessian(panel, spec.family(), params)
    P = pseudoinverse(H)
    spectrum = H.spectrum()
    D = np.diag(np.concatenate([1 / H.block_aa, 1 / H.block_gg]))
    print(f"N=T={n:>2}: smallest eigenvalues {spectrum[0]:.1e}, {spectrum[1]:.3f}; "
          f"max|P - diag inverse| = {np.max(np.abs(P.matrix() - D)):.4f}")

# the projection of X agrees with a weighted two-way least squares fit
res = xi_residualize(panel, spec.family(), params, P, weights=H.weights)
sa, sg = wls_projection(H.weights, panel.x[:, :, 0], params.alpha, params.gamma)
gap = np.max(np.abs(np.outer(sa, params.gamma) + np.outer(params.alpha, sg) - res.projection[:, :, 0]))
print(f"pseudoinverse route vs weighted least squares: {gap:.1e}")
