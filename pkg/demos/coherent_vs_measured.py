"""A coherent feedback step and the measure-then-correct protocol that mimics it.

Couple a qubit plant to a qutrit ancilla with a random unitary, discard the
ancilla, and read off the Kraus operators E_i = <i|U|psi>. Measuring the
ancilla instead, and applying nothing afterwards, gives the same plant
channel: the Choi matrices agree to machine precision.
"""

import numpy as np

from qfl.channels import (
    apply_channel,
    choi_matrix,
    cfc_dilation_choi,
    dilation_output,
    kraus_from_cfc,
    random_cfc_step,
)
from qfl.linalg import ket2dm, partial_trace, projector, purity, random_density, tensor

rng = np.random.default_rng(11)
step = random_cfc_step(2, 3, rng)
channel = kraus_from_cfc(step)

print("Kraus operators from the coupling:")
for i, e in enumerate(channel.operators):
    print(f"  E_{i} =\n{np.array2string(e, precision=3, prefix='    ')}")

completeness = sum(e.conj().T @ e for e in channel.operators)
print("sum E^dag E - I:", np.abs(completeness - np.eye(2)).max())

choi_gap = np.abs(choi_matrix(channel) - cfc_dilation_choi(step)).max()
print("Choi gap between Kraus form and dilation:", choi_gap)

rho = random_density(2, rng)
print("plant purity before:", round(purity(rho), 6))
print("after coupling     :", round(purity(dilation_output(step, rho)), 6))
print("after Kraus channel:", round(purity(apply_channel(channel, rho)), 6))

# measure the ancilla in its basis and average over outcomes
joint = step.unitary @ tensor(rho, ket2dm(step.anc_init)) @ step.unitary.conj().T
branches = []
for i in range(3):
    p = tensor(np.eye(2), projector(3, i))
    branch = partial_trace(p @ joint @ p, (2, 3), keep="plant")
    branches.append(branch)
    print(f"ancilla outcome {i}: probability {np.trace(branch).real:.4f}")
averaged = sum(branches)
print("measured-and-forgotten vs Kraus channel:", np.abs(averaged - apply_channel(channel, rho)).max())
