"""The Gaussian estimator without regressors is a rank-1 SVD.

The alternating estimator and a power-iteration factorisation are run on the
same panel and their fitted products are compared.
"""

from ifepanel import DgpSpec, compare_with_ife, dgp_generate, rank1_fit

panel, _ = dgp_generate(DgpSpec("linear_nonreg", 20, 15, seed=2), rep=0)
pca = rank1_fit(panel.y)
print(f"leading singular values: {pca.sigma1:.4f}, {pca.sigma2:.4f}")

cmp = compare_with_ife(panel)
print(f"max |alpha gamma' difference| = {cmp.max_product_diff:.2e}")
print(f"delta (alternating) = {cmp.delta_ife:.6f}, delta (SVD) = {cmp.delta_pca:.6f}")
