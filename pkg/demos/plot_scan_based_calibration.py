"""
Calibrating straight from laser scans
=====================================

Instead of matching scans first and fitting the resulting displacements,
the scan-based calibrator alternates between freezing point correspondences
and solving for the parameters. The sensor pose comes from a closed form.
The wheel radii and axle length come from a shrinking grid search.
"""

# %%
# Scans in a random landmark world
# --------------------------------

import matplotlib.pyplot as plt
import numpy as np

from wheelcal.cam import cam_calibrate, select_scan_pairs
from wheelcal.simulate import SimConfig, k1_model, synth_displacements, synth_scans

truth = k1_model()
sim = synth_displacements(SimConfig(seed=4, n_steps=120))
scans = synth_scans(sim)
pairs = select_scan_pairs(sim.odometry, truth.drive)
print(f"{len(scans)} scans, {len(pairs)} scan pairs with enough rotation and translation")

# %%
# Run the alternating solver
# --------------------------

v = truth.vector()
v[:5] *= [1.03, 0.97, 1.04, 1.2, 0.85]
v[5] += 0.02
res = cam_calibrate(scans, sim.odometry, truth.with_vector(v), pairs=pairs)

for name, t, e in zip(truth.names, truth.vector(), res.params):
    print(f"{name:>8}  truth {t:9.5f}  estimate {e:9.5f}")

# %%
# Objective per half-step
# -----------------------
# Each outer iteration first updates the sensor pose, then the drive
# parameters. Neither half-step may raise the objective on its frozen
# correspondences, which the solver checks as it goes.

vals = []
for row in res.iterations:
    vals += [row["objective_before"], row["objective_extrinsic"], row["objective_intrinsic"]]

fig, ax = plt.subplots(figsize=(6, 3))
ax.semilogy(np.arange(len(vals)), vals, marker=".")
ax.set_xlabel("half-step")
ax.set_ylabel("frozen objective")
fig.tight_layout()
plt.show()
