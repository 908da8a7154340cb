"""Continuously monitored collective spin: conditioned and averaged dynamics.

The conditioned state obeys the Ito stochastic master equation

    d rho = -i u [Fy, rho] dt - i s [Fz, rho] dt + M D[Fz] rho dt
            + sqrt(M eta) H[Fz] rho dW

with measurement record ``dy = 2 sqrt(M) eta <Fz> dt + sqrt(eta) dW``.
Averaging over records leaves the Lindblad equation without the ``H`` term.

Everything here is batched: states may carry leading axes ``(K, d, d)``
(or ``(K, 3)`` for Bloch vectors) and controls broadcast against them.
Ensembles are integrated in lock-step, each trajectory drawing its noise
from its own substream, so results do not depend on batch or worker layout.
"""

import csv
import enum
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .linalg import TOL_PSD, SpinOperators, as_density, dag, spin_operators
from .measurement import substream

CHUNK = 256


class Renorm(str, enum.Enum):
    TRACE = "trace"
    HERMITIZE = "trace+hermitize"
    CLIP = "trace+hermitize+eigenclip"


class StateRepairError(ArithmeticError):
    """Integrated state left the state space by more than the repair tolerance."""


class StepRejected(ArithmeticError):
    """Measurement-operator update produced a non-positive normalisation."""


@dataclass(frozen=True)
class AtomicEnsembleModel:
    n_atoms: int = 1
    s: float = 0.0
    meas_rate: float = 1.0
    efficiency: float = 1.0
    spin: SpinOperators = field(default=None, repr=False, compare=False)
    diag_generator: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.meas_rate <= 0:
            raise ValueError("measurement rate must be positive")
        if not 0 < self.efficiency <= 1:
            raise ValueError("detection efficiency must lie in (0, 1]")
        if self.spin is None:
            object.__setattr__(self, "spin", spin_operators(self.n_atoms))
        object.__setattr__(self, "diag_generator", _diagonal_part(self))

    @property
    def dim(self):
        return self.n_atoms + 1

    @property
    def params(self):
        return {
            "n_atoms": self.n_atoms,
            "s": self.s,
            "meas_rate": self.meas_rate,
            "efficiency": self.efficiency,
        }


@dataclass(frozen=True)
class SmeConfig:
    dt: float = None  # defaults to 1e-3 / M once a model is known
    horizon: float = 1.0
    seed: int = 0
    renorm: Renorm = Renorm.CLIP
    state_rep: str = "density"
    u_max: float = 10.0
    method: str = "rk4"  # deterministic integrator for the averaged equation

    def resolve(self, model):
        dt = self.dt if self.dt is not None else 1e-3 / model.meas_rate
        if not 0 < dt <= self.horizon:
            raise ValueError("need 0 < dt <= horizon")
        if self.state_rep not in ("density", "bloch"):
            raise ValueError(f"unknown state representation {self.state_rep!r}")
        if self.state_rep == "bloch" and model.n_atoms != 1:
            raise ValueError("Bloch representation requires a single atom")
        return dt, int(round(self.horizon / dt))


# -- superoperators -----------------------------------------------------------


def expect(op, rho):
    return np.einsum("ij,...ji->...", op, rho).real


def dissipator(op, rho):
    ld = dag(op)
    ldl = ld @ op
    return op @ rho @ ld - 0.5 * (ldl @ rho + rho @ ldl)


def innovation(op, rho):
    """``H[op] rho = op rho + rho op^dag - Tr(op rho + rho op^dag) rho``."""
    a = op @ rho + rho @ dag(op)
    return a - np.trace(a, axis1=-2, axis2=-1)[..., None, None] * rho


def _hamiltonian(model, u):
    u = np.asarray(u, dtype=float)
    return u[..., None, None] * model.spin.fy + model.s * model.spin.fz


def _diagonal_part(model):
    """Elementwise factor of ``-i s [Fz, .] + M D[Fz]``, or None if Fz is not diagonal."""
    fz = model.spin.fz
    d = np.diag(fz).real
    if np.abs(fz - np.diag(d)).max() > 0:
        return None
    gap = d[:, None] - d[None, :]
    return -1j * model.s * gap - 0.5 * model.meas_rate * gap**2


def lindblad_rhs(model, rho, u):
    """Right-hand side of the averaged (unconditioned) master equation."""
    diag = model.diag_generator
    if diag is None:
        h = _hamiltonian(model, u)
        return -1j * (h @ rho - rho @ h) + model.meas_rate * dissipator(model.spin.fz, rho)
    fy = model.spin.fy
    u = np.asarray(u, dtype=float)[..., None, None]
    return -1j * u * (fy @ rho - rho @ fy) + diag * rho


def renormalize(rho, mode=Renorm.CLIP, tol_psd=TOL_PSD):
    """Restore trace (and optionally Hermiticity and positivity).

    Only the clipping mode touches the spectrum; it raises
    :class:`StateRepairError` if an eigenvalue remains below
    ``-10 * tol_psd`` afterwards. The other modes keep the Euler step
    exactly linear in mean, at the cost of small negative eigenvalues
    near pure states.
    """
    mode = Renorm(mode)
    if mode is not Renorm.TRACE:
        rho = 0.5 * (rho + dag(rho))
    w = None
    if mode is Renorm.CLIP:
        w = np.linalg.eigvalsh(rho)
        bad = w[..., 0] < 0
        if np.any(bad):
            rho = np.array(rho, copy=True)
            wb, vb = np.linalg.eigh(rho[bad])
            rho[bad] = (vb * np.clip(wb, 0.0, None)[..., None, :]) @ dag(vb)
            w = np.where(bad[..., None], np.clip(w, 0.0, None), w)
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    if np.any(tr <= 0):
        raise StateRepairError("state trace collapsed")
    rho = rho / tr[..., None, None]
    if w is not None and np.min(w / tr[..., None]) < -10 * tol_psd:
        raise StateRepairError("negative eigenvalue survived renormalisation")
    return rho


def sme_step(model, rho, u, dW, dt, renorm=Renorm.CLIP):
    """Euler-Maruyama step of the conditioned equation."""
    dW = np.asarray(dW, dtype=float)
    fz = model.spin.fz
    drift = lindblad_rhs(model, rho, u)
    diff = np.sqrt(model.meas_rate * model.efficiency) * innovation(fz, rho)
    return renormalize(rho + drift * dt + diff * dW[..., None, None], renorm)


def measurement_record(model, rho, dW, dt):
    """``dy = 2 sqrt(M) eta <Fz> dt + sqrt(eta) dW``."""
    m, eta = model.meas_rate, model.efficiency
    return 2 * np.sqrt(m) * eta * expect(model.spin.fz, rho) * dt + np.sqrt(eta) * dW


def innovation_from_record(model, rho, dy, dt):
    m, eta = model.meas_rate, model.efficiency
    return (dy - 2 * np.sqrt(m) * eta * expect(model.spin.fz, rho) * dt) / np.sqrt(eta)


def omega_operator(model, u, dy, dt):
    d = model.dim
    fz = model.spin.fz
    m = model.meas_rate
    dy = np.asarray(dy, dtype=float)
    return (
        np.eye(d)
        - 1j * _hamiltonian(model, u) * dt
        - 0.5 * m * (fz @ fz) * dt
        + (dy * np.sqrt(m))[..., None, None] * fz
    )


def omega_step(model, rho, u, dy, dt):
    """Apply the measurement operator ``Omega(dy)`` and renormalise."""
    om = omega_operator(model, u, dy, dt)
    out = om @ rho @ dag(om)
    tr = np.trace(out, axis1=-2, axis2=-1).real
    if np.any(tr <= 0):
        raise StepRejected("measurement operator annihilated the state")
    out = out / tr[..., None, None]
    return 0.5 * (out + dag(out))


# -- Bloch form (single atom) ---------------------------------------------------


def _require_qubit(model):
    if model.n_atoms != 1:
        raise ValueError("Bloch equations hold for a single atom only")


def bloch_drift(model, r, u):
    u = np.asarray(u, dtype=float)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    m, s = model.meas_rate, model.s
    return np.stack([-0.5 * m * x - u * z + s * y, -0.5 * m * y - s * x, u * x], axis=-1)


def bloch_diffusion(model, r):
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    c = np.sqrt(model.meas_rate * model.efficiency)
    return c * np.stack([x * z, y * z, -(1 - z * z)], axis=-1)


def _bloch_renorm(r, mode):
    """Project back onto the unit ball in clipping mode; otherwise leave ``r`` alone."""
    norm = np.linalg.norm(r, axis=-1)
    if Renorm(mode) is Renorm.CLIP:
        return r / np.maximum(norm, 1.0)[..., None]
    return r


def bloch_sme_step(model, r, u, dW, dt, renorm=Renorm.CLIP):
    _require_qubit(model)
    r = np.asarray(r, dtype=float)
    dW = np.asarray(dW, dtype=float)
    r = r + bloch_drift(model, r, u) * dt + bloch_diffusion(model, r) * dW[..., None]
    return _bloch_renorm(r, renorm)


def _rk4(f, y, t, dt):
    k1 = f(t, y)
    k2 = f(t + dt / 2, y + dt / 2 * k1)
    k3 = f(t + dt / 2, y + dt / 2 * k2)
    k4 = f(t + dt, y + dt * k3)
    return y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def bloch_me_step(model, r, u, dt, method="rk4", t=0.0):
    """Advance the averaged Bloch equations by one step.

    ``u`` is a constant or a callable of time.
    """
    _require_qubit(model)
    uf = u if callable(u) else (lambda _t: u)
    f = lambda tt, rr: bloch_drift(model, rr, uf(tt))  # noqa: E731
    r = np.asarray(r, dtype=float)
    return r + dt * f(t, r) if method == "euler" else _rk4(f, r, t, dt)


def me_step(model, rho, u, dt, method="rk4", t=0.0):
    uf = u if callable(u) else (lambda _t: u)
    f = lambda tt, p: lindblad_rhs(model, p, uf(tt))  # noqa: E731
    return rho + dt * f(t, rho) if method == "euler" else _rk4(f, rho, t, dt)


def bloch_to_density(r):
    r = np.asarray(r, dtype=float)
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    out = np.empty(r.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = (1 + z) / 2
    out[..., 1, 1] = (1 - z) / 2
    out[..., 0, 1] = (x - 1j * y) / 2
    out[..., 1, 0] = (x + 1j * y) / 2
    return out


def density_to_bloch(rho):
    return np.stack(
        [2 * rho[..., 1, 0].real, 2 * rho[..., 1, 0].imag, (rho[..., 0, 0] - rho[..., 1, 1]).real],
        axis=-1,
    )


# -- controllers ----------------------------------------------------------------


class Controller:
    """Maps ``(t, rho, memory)`` to ``(u, memory)`` for a batch of states.

    ``rho`` has shape ``(K, d, d)``; ``u`` must broadcast to ``(K,)``.
    """

    def init_memory(self, rho):
        return None

    def __call__(self, t, rho, memory):
        raise NotImplementedError


class OpenLoop(Controller):
    """State-independent control ``u(t)``; a constant or a callable."""

    def __init__(self, u=0.0):
        self.u = u

    def __call__(self, t, rho, memory):
        u = self.u(t) if callable(self.u) else self.u
        return np.full(rho.shape[0], float(u)), memory


def zero_control():
    return OpenLoop(0.0)


# -- sample paths ----------------------------------------------------------------


@dataclass
class SamplePath:
    """Time-indexed record of one trajectory.

    Row ``k`` holds the state at ``times[k]`` together with the control and
    noise increments that led into it; row 0 carries zeros. ``dW`` and ``dy``
    are ``None`` for deterministic (averaged) paths.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    dW: np.ndarray = None
    dy: np.ndarray = None
    seed: int = None
    representation: str = "density"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        for name in ("states", "controls", "dW", "dy"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")

    def __len__(self):
        return len(self.times)

    def density(self):
        if self.representation == "bloch":
            return bloch_to_density(self.states)
        return self.states

    def fidelity(self, target):
        return np.einsum("kij,ji->k", self.density(), target).real

    def state_columns(self):
        if self.representation == "bloch":
            return ["x", "y", "z"]
        d = self.states.shape[-1]
        return [f"{part}{i}{j}" for i in range(d) for j in range(d) for part in ("re", "im")]

    def to_csv(self):
        buf = io.StringIO()
        meta = {"representation": self.representation, **self.params, "seed": self.seed}
        buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "u", "dW", "dy"] + self.state_columns())
        n = len(self)
        flat = self.states.reshape(n, -1)
        for k in range(n):
            if self.representation == "bloch":
                sc = [repr(float(v)) for v in flat[k]]
            else:
                sc = [repr(float(p)) for z in flat[k] for p in (z.real, z.imag)]
            dw = "" if self.dW is None else repr(float(self.dW[k]))
            dy = "" if self.dy is None else repr(float(self.dy[k]))
            w.writerow([repr(float(self.times[k])), repr(float(self.controls[k])), dw, dy] + sc)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        lines = text.splitlines()
        meta = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split())
        rep = meta.pop("representation")
        seed = meta.pop("seed")
        rows = list(csv.reader(lines[1:]))[1:]
        t = np.array([float(r[0]) for r in rows])
        u = np.array([float(r[1]) for r in rows])
        dW = None if rows[0][2] == "" else np.array([float(r[2]) for r in rows])
        dy = None if rows[0][3] == "" else np.array([float(r[3]) for r in rows])
        vals = np.array([[float(v) for v in r[4:]] for r in rows])
        if rep == "bloch":
            states = vals
        else:
            c = vals[:, 0::2] + 1j * vals[:, 1::2]
            d = int(round(np.sqrt(c.shape[1])))
            states = c.reshape(len(rows), d, d)
        params = {k: _parse_scalar(v) for k, v in meta.items()}
        return cls(t, states, u, dW, dy, _parse_scalar(seed), rep, params)


def _parse_scalar(v):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return None if v == "None" else v


# -- integration core ----------------------------------------------------------


def _initial_batch(model, rho0, k):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim == 2:
        rho0 = np.broadcast_to(as_density(rho0), (k,) + rho0.shape)
    if rho0.shape[-1] != model.dim:
        raise ValueError(f"state dim {rho0.shape[-1]} does not match model dim {model.dim}")
    return np.array(rho0, dtype=complex)


def _noise(seed, indices, n_steps, dt):
    return np.stack([substream(seed, i).standard_normal(n_steps) for i in indices]) * np.sqrt(dt)


def _integrate(model, controller, rho0, config, indices, dy_stream=None, keep_paths=True):
    """Lock-step integration of ``len(indices)`` trajectories.

    With ``dy_stream`` (shape ``(K, n)``) the innovations are recovered from
    the record (filter mode); otherwise they are drawn from the substreams.
    Returns full paths or running first/second moments of the states.
    """
    dt, n = config.resolve(model)
    k = len(indices)
    bloch = config.state_rep == "bloch"
    rho = _initial_batch(model, rho0, k)
    state = density_to_bloch(rho) if bloch else rho
    noise = None if dy_stream is not None else _noise(config.seed, indices, n, dt)
    memory = controller.init_memory(rho)
    u_max = config.u_max

    if keep_paths:
        states = np.empty((n + 1,) + state.shape, dtype=state.dtype)
        controls = np.zeros((n + 1, k))
        dWs = np.zeros((n + 1, k))
        dys = np.zeros((n + 1, k))
        states[0] = state
    else:
        acc = np.zeros((n + 1,) + state.shape[1:], dtype=state.dtype)
        acc2 = np.zeros((n + 1,) + state.shape[1:], dtype=state.dtype)
        acc[0] = state.sum(axis=0)
        acc2[0] = _sq(state).sum(axis=0)

    for step in range(n):
        t = step * dt
        u, memory = controller(t, rho, memory)
        u = np.clip(np.broadcast_to(np.asarray(u, dtype=float), (k,)), -u_max, u_max)
        if dy_stream is None:
            dW = noise[:, step]
            dy = measurement_record(model, rho, dW, dt)
        else:
            dy = dy_stream[:, step]
            dW = innovation_from_record(model, rho, dy, dt)
        if bloch:
            state = bloch_sme_step(model, state, u, dW, dt, config.renorm)
            rho = bloch_to_density(state)
        else:
            state = rho = sme_step(model, rho, u, dW, dt, config.renorm)
        if keep_paths:
            states[step + 1] = state
            controls[step + 1], dWs[step + 1], dys[step + 1] = u, dW, dy
        else:
            acc[step + 1] = state.sum(axis=0)
            acc2[step + 1] = _sq(state).sum(axis=0)

    times = np.arange(n + 1) * dt
    if keep_paths:
        return times, states, controls, dWs, dys
    return times, acc, acc2


def _sq(state):
    if np.iscomplexobj(state):
        return state.real**2 + 1j * state.imag**2
    return state**2


def _to_path(model, config, times, states, controls, dWs, dys, j=0):
    return SamplePath(
        times=times,
        states=states[:, j],
        controls=controls[:, j],
        dW=dWs[:, j],
        dy=dys[:, j],
        seed=config.seed,
        representation=config.state_rep,
        params=model.params,
    )


def simulate_trajectory(model, controller, rho0, config, index=0):
    """One conditioned trajectory; its noise is substream ``index`` of ``config.seed``."""
    out = _integrate(model, controller, rho0, config, [index])
    return _to_path(model, config, *out)


def filter_from_record(model, controller, dy_stream, rho0, config):
    """Run the quantum filter on a measurement record ``dy_stream``."""
    dt, n = config.resolve(model)
    dy_stream = np.asarray(dy_stream, dtype=float)
    if dy_stream.shape != (n,):
        raise ValueError(f"record has {dy_stream.size} increments, expected {n}")
    out = _integrate(model, controller, rho0, config, [0], dy_stream=dy_stream[None, :])
    return _to_path(model, config, *out)


def simulate_master(model, control, rho0, config):
    """Deterministic averaged evolution under an open-loop control ``u(t)``."""
    dt, n = config.resolve(model)
    uf = control if callable(control) else (lambda _t: control)
    bloch = config.state_rep == "bloch"
    rho = as_density(rho0)
    state = density_to_bloch(rho) if bloch else np.array(rho)
    states = np.empty((n + 1,) + state.shape, dtype=state.dtype)
    states[0] = state
    controls = np.zeros(n + 1)
    for step in range(n):
        t = step * dt
        if bloch:
            state = bloch_me_step(model, state, uf, dt, config.method, t)
        else:
            state = me_step(model, state, uf, dt, config.method, t)
        states[step + 1] = state
        controls[step + 1] = uf(t)
    return SamplePath(
        np.arange(n + 1) * dt, states, controls, seed=None,
        representation=config.state_rep, params=model.params,
    )


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray  # complex for density entries: re/im parts separately
    n_trajectories: int
    representation: str = "density"

    def density(self):
        if self.representation == "bloch":
            return bloch_to_density(self.mean)
        return self.mean

    def fidelity(self, target):
        """Mean overlap with a pure target and its standard error."""
        mean = np.einsum("kij,ji->k", self.density(), target).real
        if self.representation == "bloch":
            # Tr(rho P) is affine in r: (1 + r . n) / 2 with n the target Bloch vector
            n = density_to_bloch(target)
            err = 0.5 * np.sqrt((self.stderr**2 @ (n**2)))
        else:
            w = np.abs(target) ** 2
            var = np.einsum("kij,ji->k", self.stderr.real**2 + self.stderr.imag**2, w.T)
            err = np.sqrt(var)
        return mean, err


def _chunk_moments(args):
    model, controller, rho0, config, indices = args
    return _integrate(model, controller, rho0, config, indices, keep_paths=False)


def default_workers():
    env = os.environ.get("QFL_WORKERS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def ensemble_average(model, controller, rho0, n_traj, config, workers=None, chunk=CHUNK):
    """Pointwise mean and standard error over ``n_traj`` seeded trajectories.

    Trajectory ``i`` always uses substream ``i``; chunk results are merged in
    index order so the output is independent of ``workers``.
    """
    if n_traj < 2:
        raise ValueError("need at least two trajectories")
    workers = default_workers() if workers is None else workers
    jobs = [
        (model, controller, rho0, config, list(range(i, min(i + chunk, n_traj))))
        for i in range(0, n_traj, chunk)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_chunk_moments, jobs))
    else:
        parts = [_chunk_moments(j) for j in jobs]
    times = parts[0][0]
    s1 = sum(p[1] for p in parts)
    s2 = sum(p[2] for p in parts)
    mean = s1 / n_traj
    if np.iscomplexobj(mean):
        var_re = np.clip(s2.real / n_traj - mean.real**2, 0, None)
        var_im = np.clip(s2.imag / n_traj - mean.imag**2, 0, None)
        se = np.sqrt(var_re / (n_traj - 1)) + 1j * np.sqrt(var_im / (n_traj - 1))
    else:
        se = np.sqrt(np.clip(s2 / n_traj - mean**2, 0, None) / (n_traj - 1))
    return EnsembleResult(times, mean, se, n_traj, config.state_rep)
