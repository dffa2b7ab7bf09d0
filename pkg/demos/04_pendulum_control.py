"""
Torque control of a pendulum
----------------------------

A rigid bob hangs from a hinge, released at 0.3 rad. We optimize a
per-frame torque schedule so the hinge is at 0 rad after 20 frames.
The bob's vertices are driven by the skeleton, so the reduced solve works
on one joint coordinate.
"""

# %%
from pathlib import Path

import numpy as np

from softsim import optim
from softsim.scene_io import parse_scene
from softsim.sim import Simulator, joint_values

scene = parse_scene(Path(__file__).resolve().parent.parent / "fixtures" / "pendulum.scene")
passive = Simulator(scene).run()
print(f"passive angle after {scene.frames} frames: {joint_values(passive.final)[0]:+.4f} rad")

# %%
res = optim.run_control(scene, scene.loss, optim.OptimConfig(max_episodes=100, tol=1e-3))
print("loss per episode:", " ".join(f"{f:.2e}" for f in res.history))

# %%
tau = res.params.controls["torque"][:, 0]
driven = Simulator(scene).run(controls=res.params.controls)
print(f"final angle with control: {joint_values(driven.final)[0]:+.2e} rad")
print("torque schedule (N m):", np.array2string(tau, precision=3))

# %%
# Sanity check: the static torque that holds the bob still at 0.3 rad is m g d sin(theta).
m = Simulator(scene).mass.sum()
print(f"holding torque at 0.3 rad: {m * 9.81 * 0.5 * np.sin(0.3):.3f} N m")
