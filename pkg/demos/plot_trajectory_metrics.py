"""
Absolute versus relative trajectory error
=========================================

ATE compares poses in the world frame, so one early heading mistake keeps
growing. RPE compares successive motions, so it only sees local
disagreement. Two synthetic estimates of a straight drive show that the two
metrics can rank the same pair of trajectories in opposite order.
"""

import matplotlib.pyplot as plt
import numpy as np

from wheelcal.geometry import compose_chain
from wheelcal.metrics import Trajectory, ate, rpe

ref = Trajectory(np.arange(7) * 0.7, np.column_stack([np.arange(7.0), np.zeros(7), np.zeros(7)]))

# %%
# One early heading error, then perfect steps.
steps = np.tile([1.0, 0.0, 0.0], (6, 1))
steps[0, 2] = 0.05
drift = Trajectory(ref.t, compose_chain(steps))

# %%
# Small sideways jitter on every step that never accumulates.
steps = np.tile([1.0, 0.0, 0.0], (6, 1))
steps[:, 1] = 0.02 * np.array([1, -1, 1, -1, 1, -1])
jitter = Trajectory(ref.t, compose_chain(steps))

for name, tr in (("drift", drift), ("jitter", jitter)):
    print(f"{name:>7}: ATE {ate(tr, ref):.4f} m   RPE {rpe(tr, ref):.4f} m")

fig, ax = plt.subplots(figsize=(6, 2.5))
for name, tr in (("reference", ref), ("drift", drift), ("jitter", jitter)):
    ax.plot(tr.poses[:, 0], tr.poses[:, 1], marker="o", label=name)
ax.set_aspect("equal")
ax.legend()
fig.tight_layout()
plt.show()
