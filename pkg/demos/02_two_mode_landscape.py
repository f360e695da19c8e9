"""
Basins and barrier of a two-mode phantom
========================================

A 90/10 mixture of two isotropic Gaussians four units apart stands in for
healthy tissue and tumour. After training, gradient descent from 2000 voxels
finds the two basins, and the energy profile along the segment between the
modes is compared with the exact ``-log p_sigma`` of the phantom.
"""

import numpy as np

from tissue_manifold import geometry, phantom, training

spec = phantom.two_mode()
table = phantom.sample(spec, 50_000, seed=0)
model, _ = training.train(table, training.TrainConfig())

seeds = model.normalize(table.values[:2000])
basins = geometry.find_basins(model, seeds)
print("minima found:", basins.n_minima)
for m in basins.minima:
    print("  at", np.round(model.denormalize(m["location"]), 3), "energy", round(m["energy"], 3))

# the model sees the data through its normalization; sigma = 0.1 there
modes = phantom.convolved_modes(spec, 0.1 * model.norm.scale)
p0, p1 = model.normalize(modes[0]), model.normalize(modes[1])
learned = geometry.line_profile(model, p0, p1)
exact = geometry.line_profile(phantom.AnalyticField(spec.normalized(model.norm), 0.1), p0, p1)
print("barrier: learned %.3f, analytic %.3f"
      % (geometry.barrier_height(learned), geometry.barrier_height(exact)))

# a coarse side-by-side of the two profiles, both shifted to their minimum
for i in np.linspace(0, len(learned.t) - 1, 12).astype(int):
    print(f"t={learned.t[i]:6.3f}  learned {learned.energy[i] - learned.energy.min():7.3f}"
          f"  analytic {exact.energy[i] - exact.energy.min():7.3f}")
