import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfl.channels import nonselective_mfc_step
from qfl.linalg import SIGMA_X, basis, ket2dm, maximally_mixed, projector, random_density
from qfl.measurement import (
    GeneralizedMeasurement,
    RecordEntry,
    TrajectoryRecord,
    constant_policy,
    enumerate_outcomes,
    identity_policy,
    mfc_step,
    outcome_policy,
    projective,
    run_mfc,
    sample_outcome,
    substream,
)

PLUS = ket2dm((basis(2, 0) + basis(2, 1)) / np.sqrt(2))
FLIP0 = outcome_policy({0: ("X", SIGMA_X)})


def _replace_to_one():
    m0 = np.array([[0, 0], [1, 0]], dtype=complex)
    m1 = np.array([[0, 0], [0, 1]], dtype=complex)
    return GeneralizedMeasurement((m0, m1))


def test_incomplete_measurement_rejected():
    with pytest.raises(ValueError):
        GeneralizedMeasurement((projector(2, 0),))


def test_enumerate_z_on_plus():
    out = enumerate_outcomes(projective(2), PLUS)
    assert [o.index for o in out] == [0, 1]
    assert abs(out[0].probability - 0.5) < 1e-15 and abs(out[1].probability - 0.5) < 1e-15
    assert np.abs(out[0].post_state - projector(2, 0)).max() < 1e-15
    assert np.abs(out[1].post_state - projector(2, 1)).max() < 1e-15


def test_enumerate_flags_zero_branch():
    out = enumerate_outcomes(_replace_to_one(), projector(2, 0))
    assert abs(out[0].probability - 1) < 1e-15
    assert np.abs(out[0].post_state - projector(2, 1)).max() < 1e-15
    assert out[1].pruned and out[1].post_state is None

    out = enumerate_outcomes(projective(2), projector(2, 0))
    assert not out[0].pruned and out[1].pruned


def test_sample_deterministic_branch():
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    assert all(sample_outcome(projective(2), projector(2, 0), rng).index == 0 for _ in range(20))
    assert rng.bit_generator.state == state


def test_sample_binomial():
    rng = np.random.default_rng(1)
    n = 10_000
    k = sum(sample_outcome(projective(2), PLUS, rng).index == 0 for _ in range(n))
    assert abs(k / n - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_sample_replay():
    a = [sample_outcome(projective(2), PLUS, np.random.default_rng(42)).index for _ in range(5)]
    r1, r2 = np.random.default_rng(42), np.random.default_rng(42)
    s1 = [sample_outcome(projective(2), PLUS, r1).index for _ in range(50)]
    s2 = [sample_outcome(projective(2), PLUS, r2).index for _ in range(50)]
    assert s1 == s2 and len(set(a)) == 1


def test_substreams_independent_of_order():
    a = substream(5, 3).random(4)
    substream(5, 0).random(100)
    assert np.abs(substream(5, 3).random(4) - a).max() == 0
    assert np.abs(substream(5, 4).random(4) - a).max() > 0


def test_mfc_identity_policy():
    rng = np.random.default_rng(3)
    rho, entry = mfc_step(projective(2), identity_policy, PLUS, rng)
    assert np.abs(rho - projector(2, entry.n)).max() < 1e-15
    assert entry.unitary_id == "I"


def test_mfc_flip_on_zero():
    for seed in range(20):
        rho, _ = mfc_step(projective(2), FLIP0, PLUS, np.random.default_rng(seed))
        assert np.abs(rho - projector(2, 1)).max() < 1e-15


def test_mfc_average_matches_nonselective():
    rng = np.random.default_rng(4)
    rho0 = random_density(3, rng)
    u = np.roll(np.eye(3), 1, axis=0)
    pol = outcome_policy({1: ("shift", u)})
    n = 10_000
    acc = np.zeros((3, 3), dtype=complex)
    acc2 = np.zeros((3, 3))
    for _ in range(n):
        rho, _ = mfc_step(projective(3), pol, rho0, rng)
        acc += rho
        acc2 += np.abs(rho) ** 2
    mean = acc / n
    se = np.sqrt(np.clip(acc2 / n - np.abs(mean) ** 2, 0, None) / n)
    ref = nonselective_mfc_step(projective(3), pol, rho0)
    assert np.all(np.abs(mean - ref) <= 5 * se + 1e-12)


def test_run_mfc_single_step_equals_mfc_step():
    r1, rec = run_mfc([(projective(2), identity_policy)], PLUS, np.random.default_rng(8))
    r2, entry = mfc_step(projective(2), identity_policy, PLUS, np.random.default_rng(8))
    assert np.abs(r1 - r2).max() == 0 and rec.outcomes == [entry.n]


def test_run_mfc_two_step_flip():
    schedule = [(projective(2), FLIP0), (projective(2), FLIP0)]
    for seed in range(30):
        rho, rec = run_mfc(schedule, maximally_mixed(2), np.random.default_rng(seed))
        assert abs(rho[1, 1].real - 1) < 1e-15
        assert len(rec) == len(schedule)


def test_policy_sees_history():
    seen = []

    def pol(post, history):
        seen.append(history)
        return identity_policy(post, history)

    run_mfc([(projective(2), pol)] * 3, projector(2, 1), np.random.default_rng(0))
    assert seen == [(1,), (1, 1), (1, 1, 1)]


def test_non_unitary_feedback_rejected():
    with pytest.raises(ValueError):
        mfc_step(projective(2), constant_policy(2 * np.eye(2)), PLUS, np.random.default_rng(0))


def test_record_round_trip():
    rho, rec = run_mfc([(projective(2), FLIP0)] * 3, PLUS, np.random.default_rng(2), seed=2, snapshot=True)
    back = TrajectoryRecord.from_jsonl(rec.to_jsonl(), seed=2)
    assert back.outcomes == rec.outcomes
    assert [e.unitary_id for e in back.steps] == [e.unitary_id for e in rec.steps]
    assert np.abs(back.steps[-1].state - rho).max() == 0


def test_record_rejects_gaps():
    rec = TrajectoryRecord()
    with pytest.raises(ValueError):
        rec.append(RecordEntry(1, 0, "I"))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**32 - 1))
def test_outcome_probabilities_sum_to_one(d, seed):
    rng = np.random.default_rng(seed)
    rho = random_density(d, rng)
    out = enumerate_outcomes(projective(d), rho)
    assert abs(sum(o.probability for o in out) - 1) < 1e-12
    for o in out:
        if not o.pruned:
            assert abs(np.trace(o.post_state) - 1) < 1e-12


def test_selective_mean_converges_to_channel():
    from qfl.linalg import random_unitary
    from qfl.measurement import constant_policy

    rng = np.random.default_rng(12)
    u = random_unitary(3, rng)
    ops = [u[:, [k]] @ u[:, [k]].conj().T for k in range(3)]
    meas = GeneralizedMeasurement(tuple(ops))
    v = random_unitary(3, rng)
    rho0 = random_density(3, rng)
    k = 10_000
    acc = np.zeros((3, 3), dtype=complex)
    for _ in range(k):
        rho, _ = mfc_step(meas, constant_policy(v), rho0, rng)
        assert np.linalg.eigvalsh(rho).min() > -1e-12
        acc += rho
    exact = nonselective_mfc_step(meas, constant_policy(v), rho0)
    assert np.linalg.norm(acc / k - exact) <= 5 / np.sqrt(k)


def test_records_bit_identical_for_same_seed():
    schedule = [(projective(2), FLIP0), (projective(2), identity_policy)] * 3
    a = run_mfc(schedule, PLUS, np.random.default_rng(99), seed=99, snapshot=True)[1].to_jsonl()
    b = run_mfc(schedule, PLUS, np.random.default_rng(99), seed=99, snapshot=True)[1].to_jsonl()
    assert a == b
