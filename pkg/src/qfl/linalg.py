"""Dense complex linear algebra and quantum-state primitives.

States are plain complex ``numpy`` arrays. :func:`as_density` validates
(and lightly repairs) a candidate density matrix and returns a read-only
array, so a validated state can be shared freely.

Basis convention: index 0 is ``|0>`` and indices ascend. For collective
spins the index ``m`` carries ``F_z`` eigenvalue ``m - N/2``, which for a
single atom gives ``F_z = -sigma_z / 2`` and ``F_y = -sigma_y / 2``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

TOL_HERM = 1e-9
TOL_TRACE = 1e-9
TOL_PSD = 1e-9
TOL_NORM = 1e-9
TOL_BLOCH = 1e-9

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (SIGMA_X, SIGMA_Y, SIGMA_Z)


class StateError(ValueError):
    """Raised when an array cannot be interpreted as a valid quantum state."""


def _frozen(a):
    a = np.array(a, dtype=complex)
    a.flags.writeable = False
    return a


def as_matrix(m):
    """Return ``m`` as a square, finite complex matrix."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def as_density(rho, tol_herm=TOL_HERM, tol_trace=TOL_TRACE, tol_psd=TOL_PSD):
    """Validate a density matrix, repairing drift that is within tolerance.

    Hermiticity is restored by symmetrisation and the trace is renormalised
    when the deviations are below ``tol_herm`` and ``tol_trace``. The
    minimum eigenvalue must be at least ``-tol_psd``.

    Returns
    -------
    numpy.ndarray
        Read-only Hermitian, unit-trace matrix.
    """
    rho = as_matrix(rho)
    if np.abs(rho - rho.conj().T).max() > tol_herm:
        raise StateError("matrix is not Hermitian")
    rho = 0.5 * (rho + rho.conj().T)
    tr = np.trace(rho).real
    if abs(tr - 1.0) > tol_trace:
        raise StateError(f"trace {tr!r} differs from 1")
    rho = rho / tr
    if np.linalg.eigvalsh(rho)[0] < -tol_psd:
        raise StateError("matrix has a negative eigenvalue")
    return _frozen(rho)


def as_pure_state(psi, tol=TOL_NORM):
    psi = np.asarray(psi, dtype=complex).ravel()
    if abs(np.linalg.norm(psi) - 1.0) > tol:
        raise StateError("state vector is not normalised")
    return _frozen(psi / np.linalg.norm(psi))


def basis(dim, k):
    """Computational basis ket ``|k>`` of dimension ``dim``."""
    if not 0 <= k < dim:
        raise IndexError(f"basis index {k} out of range for dim {dim}")
    v = np.zeros(dim, dtype=complex)
    v[k] = 1.0
    return v


def ket2dm(psi):
    psi = np.asarray(psi, dtype=complex).ravel()
    return np.outer(psi, psi.conj())


def projector(dim, k):
    return ket2dm(basis(dim, k))


def maximally_mixed(dim):
    return np.eye(dim, dtype=complex) / dim


def dag(m):
    return np.conj(np.swapaxes(m, -1, -2))


def commutator(a, b):
    return a @ b - b @ a


def tensor(*ops):
    """Kronecker product; the leftmost factor is the slowest index."""
    out = as_matrix(ops[0])
    for op in ops[1:]:
        out = np.kron(out, as_matrix(op))
    return out


def partial_trace(rho, dims, keep=0):
    """Reduce a bipartite operator on ``dims = (d_plant, d_anc)``.

    ``keep`` selects the subsystem that survives: 0 (or ``"plant"``) keeps
    the left factor, 1 (or ``"ancilla"``) keeps the right one.
    """
    d0, d1 = dims
    rho = as_matrix(rho)
    if rho.shape[0] != d0 * d1:
        raise ValueError(f"dimension {rho.shape[0]} does not match dims {dims}")
    keep = {"plant": 0, "ancilla": 1}.get(keep, keep)
    r = rho.reshape(d0, d1, d0, d1)
    if keep == 0:
        return np.einsum("ijkj->ik", r)
    if keep == 1:
        return np.einsum("ijil->jl", r)
    raise ValueError(f"keep must be 0 or 1, got {keep!r}")


def purity(rho):
    rho = as_matrix(rho)
    return float(np.real(np.einsum("ij,ji->", rho, rho)))


def is_pure(rho, tol=1e-9):
    return abs(purity(rho) - 1.0) <= tol


def fidelity_to_target(rho, target, tol=1e-9):
    """Overlap ``Tr(rho @ target)`` with a pure target state."""
    target = as_matrix(target)
    if not is_pure(target, tol):
        raise StateError("target state must be pure")
    return float(np.real(np.einsum("ij,ji->", as_matrix(rho), target)))


def to_bloch(rho):
    rho = as_matrix(rho)
    if rho.shape != (2, 2):
        raise ValueError("Bloch vectors are defined for qubits only")
    return np.array([np.real(np.trace(rho @ s)) for s in PAULIS])


def from_bloch(r, tol=TOL_BLOCH):
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise ValueError("Bloch vector must have three components")
    if np.dot(r, r) > (1.0 + tol) ** 2:
        raise StateError(f"Bloch vector {r} lies outside the unit ball")
    return 0.5 * (np.eye(2) + r[0] * SIGMA_X + r[1] * SIGMA_Y + r[2] * SIGMA_Z)


@dataclass(frozen=True)
class SpinOperators:
    n_atoms: int
    fz: np.ndarray
    fy: np.ndarray
    fx: np.ndarray

    @property
    def dim(self):
        return self.n_atoms + 1


def spin_operators(n_atoms):
    """Collective spin-``N/2`` operators in ascending-``m`` order.

    For ``n_atoms == 1``::

        fz = -0.5 * diag(1, -1)
        fy = -0.5 * [[0, -1j], [1j, 0]]
    """
    if int(n_atoms) != n_atoms or n_atoms < 1:
        raise ValueError("n_atoms must be a positive integer")
    n_atoms = int(n_atoms)
    j = n_atoms / 2
    m = np.arange(n_atoms + 1) - j
    # raising operator: J+ |m> = sqrt(j(j+1) - m(m+1)) |m+1>
    jp = np.diag(np.sqrt(j * (j + 1) - m[:-1] * (m[:-1] + 1)), k=-1).astype(complex)
    jm = jp.conj().T
    return SpinOperators(
        n_atoms=n_atoms,
        fz=_frozen(np.diag(m)),
        fy=_frozen((jp - jm) / 2j),
        fx=_frozen((jp + jm) / 2),
    )


@dataclass(frozen=True)
class FockOperators:
    cutoff: int
    lowering: np.ndarray

    @property
    def raising(self):
        return self.lowering.conj().T

    @property
    def number(self):
        return self.raising @ self.lowering


def annihilation(cutoff):
    """Truncated bosonic lowering operator on ``|0>, ..., |cutoff>``."""
    if cutoff < 1:
        raise ValueError("cutoff must be at least 1")
    a = np.diag(np.sqrt(np.arange(1, cutoff + 1)), k=1).astype(complex)
    return FockOperators(cutoff=int(cutoff), lowering=_frozen(a))


def matrix_exponential(m, tol=1e-12):
    """Matrix exponential.

    Hermitian and skew-Hermitian inputs go through an eigendecomposition,
    which keeps ``exp`` of a skew-Hermitian generator unitary to rounding.
    Anything else falls back to scaling-and-squaring.
    """
    m = as_matrix(m)
    scale = max(1.0, np.abs(m).max())
    if np.abs(m - m.conj().T).max() <= tol * scale:
        w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
        return (v * np.exp(w)) @ v.conj().T
    if np.abs(m + m.conj().T).max() <= tol * scale:
        h = 0.5j * (m - m.conj().T)  # m = -i h with h Hermitian
        w, v = np.linalg.eigh(h)
        return (v * np.exp(-1j * w)) @ v.conj().T
    return scipy.linalg.expm(m)


def random_unitary(dim, rng):
    """Haar-random unitary via QR of a complex Ginibre matrix."""
    z = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def random_pure_state(dim, rng):
    psi = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return psi / np.linalg.norm(psi)


def random_density(dim, rng, rank=None):
    """Random density matrix of given rank (full rank by default)."""
    rank = dim if rank is None else rank
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real
