"""Open loop versus feedback, and why an observer is needed.

x' = x + u with u = -2x converges for any start. The open-loop law
u = -2 exp(-t) x0 only works if x0 is known exactly; a 1% error grows like
exp(t). For the oscillator x'' = -x + u with position readout, no static
output gain stabilises the loop (the trace of A + BLC is always zero), but
a state observer does.
"""

import numpy as np

from qfl.classical import (
    LinearSystem,
    ScalarSystem,
    closed_loop_eigenvalues,
    example1_simulate,
    observer_simulate,
    static_output_feedback_check,
)

s = ScalarSystem(x0=1.0, x0_measured=1.01)
for mode in ("feedback", "openloop"):
    t, x, _ = example1_simulate(s, mode, 10.0, 1e-3)
    print(f"{mode:9s}: x(5) = {x[5000]: .4e}, x(10) = {x[-1]: .4e}")

sys_ = LinearSystem()
rep = static_output_feedback_check(sys_, np.arange(-100, 100.05, 0.1))
print(rep.summary(), "| max |trace| =", rep.max_trace_abs)

print("observer loop eigenvalues:", np.round(closed_loop_eigenvalues(sys_).real, 12))
t, x, z, u = observer_simulate(sys_, [1.0, 0.0], [0.0, 0.0], 15.0, 1e-3)
for k in (0, 2000, 5000, 10000, 15000):
    print(f"t = {t[k]:4.1f}  |x| = {np.linalg.norm(x[k]):.3e}  |x - z| = {np.linalg.norm(x[k] - z[k]):.3e}")
