"""
When the kinematic model is wrong
=================================

A learned map from wheel ticks to sensor motion needs no kinematic model.
It pays for that with a linearisation error, because a single linear map
cannot capture the heading change inside one step. The trade-off is shown
on two kinds of distortion.

1. Per-wheel radius errors. A refit of the parametric model absorbs these
   completely.
2. A coupling between the body axes that no Mecanum parameter setting can
   reproduce.
"""

# %%
# Helper: train on one log, score on another
# -------------------------------------------

import warnings

import numpy as np

from wheelcal.cirls import cirls_calibrate
from wheelcal.kinematics import predict_displacements
from wheelcal.modelfree import fit_linear_model, gp_fit, optimize_hyperparameters
from wheelcal.simulate import Distortion, SimConfig, k1_model, mecanum_model, synth_model_free

warnings.simplefilter("ignore")


def held_out(model, distortion, **kw):
    train = synth_model_free(SimConfig(model=model, seed=1, **kw), distortion)
    test = synth_model_free(SimConfig(model=model, seed=2, **kw), distortion)
    param = cirls_calibrate(train.sim.obs, train.sim.odometry, model).model
    n = len(test.sim.odometry.t) - 1
    segs = test.sim.odometry.segments(np.arange(n), np.arange(1, n + 1))
    lin = fit_linear_model(train.ticks, train.s_hat, train.sigma)
    C, h, _ = optimize_hyperparameters(train.ticks, train.s_hat, train.sigma, kernel="linear", mean="linear")
    gp = gp_fit(train.ticks, train.s_hat, train.sigma, kernel="linear", mean="linear", hypers=h, C=C)
    preds = {"parametric": predict_displacements(param, segs), "linear": lin.predict(test.ticks),
             "GP (linear kernel)": gp.predict(test.ticks)[0]}
    for name, p in preds.items():
        err = np.sqrt(np.mean(np.sum((p - test.f_true)[:, :2] ** 2, axis=1)))
        print(f"  {name:>20}: {1e3 * err:6.2f} mm per step")


# %%
# Radius scale on a differential drive
# ------------------------------------
# The refit radii soak up the distortion, so the parametric model wins.

print("radius scale (1.03, 0.98):")
held_out(k1_model(), Distortion("radius-scale", scale=(1.03, 0.98)))

# %%
# Axis coupling on a Mecanum platform
# -----------------------------------
# Here the parametric model is structurally wrong and the learned maps win.

print("axis coupling 0.3:")
held_out(mecanum_model(), Distortion("axis-skew", coupling=((0, 0.3, 0), (0.3, 0, 0), (0, 0, 0))),
         max_turn_rate=0.6)
