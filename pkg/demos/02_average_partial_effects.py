"""Average partial effects for a Poisson count model.

The effect of a regressor on the conditional mean is ``beta exp(z)``.  The
report holds the plug-in estimate, its bias-corrected version and a
standard error.
"""

import numpy as np

from ifepanel import ContinuousDeriv, DgpSpec, Poisson, analyze_ape, dgp_generate, fit_ife

panel, truth = dgp_generate(DgpSpec("poisson_static", 40, 30, beta0=(0.5,), seed=4), rep=0)
fit = fit_ife(panel, Poisson())
report = analyze_ape(panel, Poisson(), fit, ContinuousDeriv(0), L=0)

for key, value in report.to_dict().items():
    print(f"{key:>18}: {value}")

# the same quantity at the true parameters, for comparison
pi0 = truth.alpha[:, None] * truth.gamma[None, :]
z0 = panel.x[:, :, 0] * truth.beta[0] + pi0
print(f"{'infeasible truth':>18}: {float(np.mean(truth.beta[0] * np.exp(z0))):.4f}")
