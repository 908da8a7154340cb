"""Putting one excitation into a mode whose coupling strength is uncertain.

The coherent route swaps an excitation in from an ancilla for a time set by
the assumed coupling; a wrong guess leaves the plant partly empty. The
measured route couples for a short time, checks the ancilla and repeats.
It never uses the coupling value, and its failure rate falls as
cos^(2n)(theta t).
"""

import math

import numpy as np

from qfl.linalg import projector
from qfl.measurement import substream
from qfl.stateprep import (
    MfcPrepConfig,
    TwoModeModel,
    cfc_fidelity_vs_mismatch,
    mfc_failure_prob,
    mfc_prepare,
    verify_amplitude_table,
)

theta = 1.0
rep = verify_amplitude_table(theta, 0.5)
print("amplitude table: max magnitude error", f"{rep.max_magnitude_error:.1e}")
print("rows whose sine terms carry the opposite sign:", rep.rows_with_sign_mismatch())

print("\ncoherent preparation, fidelity vs assumed/true coupling:")
for r, f in cfc_fidelity_vs_mismatch(theta, [0.8, 1.0, 1.25, 1.5, 2.0, 3.0]):
    print(f"  ratio {r:4.2f}: {f:.4f}")

print("\nmeasured preparation with theta t = pi/4 (1000 runs):")
cfg = MfcPrepConfig(round_time=math.pi / 4 / theta, max_rounds=6)
runs = [mfc_prepare(TwoModeModel(theta), cfg, projector(2, 0), substream(3, i)) for i in range(1000)]
used = np.array([r.rounds_used for r in runs])
ok = np.array([r.success for r in runs])
for n in range(1, 7):
    emp = np.mean(~(ok & (used <= n)))
    print(f"  after {n} rounds: failure {emp:.3f}  (cos^2n: {mfc_failure_prob(theta, cfg.round_time, n):.3f})")
print("first run outcome log:", runs[0].outcome_string)
