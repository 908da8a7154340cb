"""Why the averaged equation cannot prepare an eigenstate, and real-time feedback can.

Start an atom in the maximally mixed state. Under the averaged master
equation the fidelity to |1> stays at 1/2 whatever the control does. Under
continuous measurement with the switching feedback law, the conditioned
state is steered to |1> on almost every trajectory.
"""

import numpy as np

from qfl.control import StabilizerController, StabilizerParams
from qfl.linalg import maximally_mixed, projector
from qfl.sme import AtomicEnsembleModel, SmeConfig, ensemble_average, simulate_master, simulate_trajectory

model = AtomicEnsembleModel(n_atoms=1, meas_rate=1.0)
target = projector(2, 1)
rho0 = maximally_mixed(2)
cfg = SmeConfig(dt=1e-3, horizon=10.0, seed=0)

for u in (0.0, 1.0, lambda t: 4 * np.sin(3 * t)):
    path = simulate_master(model, u, rho0, cfg)
    f = path.fidelity(target)
    print(f"averaged equation: fidelity range [{f.min():.6f}, {f.max():.6f}]")

ctrl = StabilizerController(StabilizerParams(target, gamma=0.4, u_max=10.0))
one = simulate_trajectory(model, ctrl, rho0, cfg)
print("one conditioned trajectory, fidelity every 2 time units:")
print(np.round(one.fidelity(target)[::2000], 4))

ens = ensemble_average(model, ctrl, rho0, 300, cfg)
f, se = ens.fidelity(target)
for k in range(0, len(f), 2000):
    print(f"t = {ens.times[k]:5.1f}  mean fidelity {f[k]:.4f} +/- {se[k]:.4f}")
