"""Trajectory/cohort simulation and the complete-likelihood oracle checks."""

import math

import numpy as np
import pytest

from screenhmm.model import (
    AgePartition,
    ClassComponent,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
)
from screenhmm.simulate import (
    LatentTrajectory,
    SimulationSpec,
    complete_log_likelihood,
    path_statistics,
    simulate_cohort,
    simulate_sequence,
    simulate_trajectory,
)
from screenhmm.kernels import interval_transition
from conftest import random_intensity


def absorbing_chain(lam, part=None):
    part = part or AgePartition((50.0,))
    q = np.array([[-lam, lam], [0.0, 0.0]])
    allowed = np.array([[False, True], [False, False]])
    return PiecewiseIntensity(
        partition=part, segments=tuple(q for _ in range(part.n_segments)), allowed=allowed
    )


def two_segment_chain(lam1, lam2, cut):
    part = AgePartition((cut,))
    allowed = np.array([[False, True], [False, False]])
    q1 = np.array([[-lam1, lam1], [0.0, 0.0]])
    q2 = np.array([[-lam2, lam2], [0.0, 0.0]])
    return PiecewiseIntensity(partition=part, segments=(q1, q2), allowed=allowed)


def single_state_model(emission_probs=(1.0, 0.0), rate=1.0, n_classes=1,
                       class_prior=None):
    part = AgePartition((50.0,))
    q = np.zeros((1, 1))
    intensity = PiecewiseIntensity(
        partition=part, segments=(q, q), allowed=np.zeros((1, 1), dtype=bool)
    )
    em = EmissionModel(
        rates=np.array([[rate]]),
        grade_probs=(np.array([list(emission_probs)]),),
        grade_priors=(np.ones((1, 2)),),
    )
    comp = ClassComponent(
        intensity=intensity,
        initial=np.ones((2, 1)),
        initial_priors=np.ones((2, 1)),
        emission=em,
    )
    prior = class_prior if class_prior is not None else [1.0 / n_classes] * n_classes
    return HierarchicalModel(
        class_prior=np.asarray(prior), classes=tuple(comp for _ in range(n_classes))
    )


class TestSimulateTrajectory:
    def test_absorbing_initial_state_never_jumps(self, rng):
        intensity = absorbing_chain(0.8)
        traj = simulate_trajectory(intensity, 1, 20.0, 45.0, rng)
        assert traj.jump_ages == ()
        assert traj.states == (1,)
        np.testing.assert_allclose(traj.occupancy, [0.0, 25.0], atol=1e-10)

    def test_first_jump_time_is_exponential(self):
        lam = 0.5
        intensity = absorbing_chain(lam)
        rng = np.random.default_rng(31)
        n = 100_000
        times = np.empty(n)
        for i in range(n):
            traj = simulate_trajectory(intensity, 0, 0.0, 200.0, rng)
            times[i] = traj.jump_ages[0] if traj.jump_ages else 200.0
        se = times.std(ddof=1) / math.sqrt(n)
        assert abs(times.mean() - 1.0 / lam) <= 3 * se

    def test_two_segment_survival_curve(self):
        lam1, lam2, cut = 0.3, 0.9, 4.0
        intensity = two_segment_chain(lam1, lam2, cut)
        rng = np.random.default_rng(5)
        n = 100_000
        first_jump = np.full(n, np.inf)
        for i in range(n):
            traj = simulate_trajectory(intensity, 0, 0.0, 30.0, rng)
            if traj.jump_ages:
                first_jump[i] = traj.jump_ages[0]
        for t in np.linspace(0.5, 9.5, 10):
            expected = math.exp(-lam1 * min(t, cut)) * math.exp(
                -lam2 * max(0.0, t - cut)
            )
            freq = float(np.mean(first_jump > t))
            se = math.sqrt(max(expected * (1 - expected), 1e-12) / n)
            assert abs(freq - expected) <= 3 * se + 1e-9

    def test_stats_match_recomputation_exactly(self, rng):
        part = AgePartition((25.0, 32.0))
        intensity = random_intensity(rng, 3, part)
        for _ in range(50):
            traj = simulate_trajectory(intensity, 0, 20.0, 40.0, rng)
            occ, counts = path_statistics(
                traj.start_age, traj.end_age, traj.jump_ages, traj.states,
                traj.n_states, traj.reset_ages,
            )
            np.testing.assert_array_equal(occ, traj.occupancy)
            np.testing.assert_array_equal(counts, traj.jump_counts)
            assert occ.sum() == pytest.approx(
                traj.end_age - traj.start_age, abs=1e-10
            )

    def test_invalid_window(self, rng):
        intensity = absorbing_chain(1.0)
        with pytest.raises(ValueError):
            simulate_trajectory(intensity, 0, 30.0, 30.0, rng)


class TestSimulateSequence:
    def test_deterministic_single_state(self, rng):
        model = single_state_model(emission_probs=(1.0, 0.0))
        z, traj, seq = simulate_sequence(model, [25.0, 27.0, 30.0], 32.0, rng)
        assert z == 0
        assert traj.states == (0,)
        assert seq.censor_outcome == "alive"
        for v in seq.visits:
            assert v.results[0][1] == 0

    def test_degenerate_class_prior(self, rng):
        model = single_state_model(n_classes=2, class_prior=[1.0, 0.0])
        for _ in range(25):
            z, _, _ = simulate_sequence(model, [25.0], 26.0, rng)
            assert z == 0

    def test_class_frequencies_match_prior(self):
        rng = np.random.default_rng(8)
        p = 0.3
        model = single_state_model(n_classes=2, class_prior=[1 - p, p])
        n = 10_000
        hits = sum(
            simulate_sequence(model, [25.0, 26.0], 27.0, rng)[0] == 1
            for _ in range(n)
        )
        se = math.sqrt(p * (1 - p) / n)
        assert abs(hits / n - p) <= 3 * se

    def test_treatment_resets_to_normal(self, rng):
        # frozen dynamics, distinct start state: the only state change is the reset
        part = AgePartition((50.0,))
        q = np.zeros((2, 2))
        intensity = PiecewiseIntensity(
            partition=part, segments=(q, q), allowed=np.zeros((2, 2), dtype=bool)
        )
        em = EmissionModel(
            rates=np.array([[0.0], [5.0]]),
            grade_probs=(np.array([[1.0, 0.0], [0.0, 1.0]]),),
            grade_priors=(np.ones((2, 2)),),
        )
        comp = ClassComponent(
            intensity=intensity,
            initial=np.array([[0.0, 1.0], [0.0, 1.0]]),
            initial_priors=np.ones((2, 2)),
            emission=em,
            normal_state=0,
        )
        model = HierarchicalModel(class_prior=np.array([1.0]), classes=(comp,))
        z, traj, seq = simulate_sequence(
            model, [25.0, 28.0, 31.0], 33.0, rng, treated=[False, True, False]
        )
        assert traj.states == (1, 0)
        assert traj.reset_ages == (28.0,)
        assert traj.jump_counts.sum() == 0          # resets are not rate jumps
        assert seq.visits[1].counts[0] > 0          # emitted from pre-reset state
        assert seq.visits[2].counts[0] == 0         # post-reset state is silent

    def test_death_outcome_recorded(self):
        rng = np.random.default_rng(12)
        part = AgePartition((50.0,))
        intensity = absorbing_chain(5.0, part)
        em = EmissionModel(
            rates=np.array([[1.0], [0.0]]),
            grade_probs=(np.array([[0.7, 0.3], [0.5, 0.5]]),),
            grade_priors=(np.ones((2, 2)),),
            death_state=1,
        )
        comp = ClassComponent(
            intensity=intensity,
            initial=np.array([[1.0, 0.0], [1.0, 0.0]]),
            initial_priors=np.ones((2, 2)),
            emission=em,
        )
        model = HierarchicalModel(class_prior=np.array([1.0]), classes=(comp,))
        outcomes = [
            simulate_sequence(model, [25.0], 28.0, rng)[2].censor_outcome
            for _ in range(50)
        ]
        assert outcomes.count("death") > 40  # rate 5/yr over 3 years


class TestCohort:
    def test_reproducible_and_order_independent(self, rng):
        model = single_state_model(n_classes=2, class_prior=[0.6, 0.4])
        spec = SimulationSpec(cohort_size=30)
        seqs1, truths1 = simulate_cohort(model, spec, seed=4)
        seqs2, truths2 = simulate_cohort(model, spec, seed=4)
        for a, b in zip(seqs1, seqs2):
            assert a.censor_age == b.censor_age
            assert [v.age for v in a.visits] == [v.age for v in b.visits]
        assert [t[1] for t in truths1] == [t[1] for t in truths2]

    def test_single_class_reduces_to_trajectory_plus_emissions(self):
        # one class, no treatment: visit-level grade frequencies must match
        # direct trajectory simulation + independent emission draws
        lam = 0.25
        part = AgePartition((50.0,))
        intensity = absorbing_chain(lam, part)
        em = EmissionModel(
            rates=np.array([[1.5], [1.5]]),
            grade_probs=(np.array([[0.9, 0.1], [0.2, 0.8]]),),
            grade_priors=(np.ones((2, 2)),),
        )
        comp = ClassComponent(
            intensity=intensity,
            initial=np.array([[1.0, 0.0], [1.0, 0.0]]),
            initial_priors=np.ones((2, 2)),
            emission=em,
        )
        model = HierarchicalModel(class_prior=np.array([1.0]), classes=(comp,))
        ages = [25.0, 29.0]
        n = 100_000
        rng1 = np.random.default_rng(100)
        grades_seq = np.zeros(2)
        total_seq = 0
        for _ in range(n):
            _, _, seq = simulate_sequence(model, ages, 30.0, rng1)
            grades_seq += seq.visits[1].results[0]
            total_seq += seq.visits[1].counts[0]
        rng2 = np.random.default_rng(200)
        grades_dir = np.zeros(2)
        total_dir = 0
        from screenhmm.emissions import sample_visit

        for _ in range(n):
            traj = simulate_trajectory(intensity, 0, ages[0], 30.0, rng2)
            counts, results = sample_visit(em, traj.state_at(ages[1]), rng2)
            grades_dir += results[0]
            total_dir += counts[0]
        f1 = grades_seq[1] / total_seq
        f2 = grades_dir[1] / total_dir
        se = math.sqrt(f2 * (1 - f2) * (1.0 / total_seq + 1.0 / total_dir))
        assert abs(f1 - f2) <= 3 * se


def chain_3state(partition=None):
    part = partition or AgePartition((50.0,))
    q = np.array(
        [[-0.7, 0.5, 0.2], [0.3, -0.5, 0.2], [0.1, 0.3, -0.4]]
    )
    allowed = ~np.eye(3, dtype=bool)
    return PiecewiseIntensity(
        partition=part, segments=tuple(q for _ in range(part.n_segments)), allowed=allowed
    )


def empty_sequence(censor_age, outcome="alive"):
    return ScreeningSequence(visits=(), censor_age=censor_age, censor_outcome=outcome)


class TestCompleteLogLikelihood:
    def test_pure_survival(self, rng):
        part = AgePartition((50.0,))
        intensity = random_intensity(rng, 2, part)
        em = EmissionModel(
            rates=np.array([[1.0], [1.0]]),
            grade_probs=(np.array([[0.5, 0.5], [0.5, 0.5]]),),
            grade_priors=(np.ones((2, 2)),),
        )
        traj = LatentTrajectory.from_path(20.0, 28.0, (), (0,), 2)
        got = complete_log_likelihood(intensity, em, traj, empty_sequence(28.0))
        q0 = -intensity.segments[0][0, 0]
        assert got == pytest.approx(-q0 * 8.0, abs=1e-12)

    def test_one_jump_adds_log_rate(self, rng):
        part = AgePartition((50.0,))
        intensity = random_intensity(rng, 2, part)
        em = EmissionModel(
            rates=np.array([[1.0], [1.0]]),
            grade_probs=(np.array([[0.5, 0.5], [0.5, 0.5]]),),
            grade_priors=(np.ones((2, 2)),),
        )
        traj = LatentTrajectory.from_path(20.0, 28.0, (23.0,), (0, 1), 2)
        got = complete_log_likelihood(intensity, em, traj, empty_sequence(28.0))
        q = intensity.segments[0]
        expected = q[0, 0] * 3.0 + math.log(q[0, 1]) + q[1, 1] * 5.0
        assert got == pytest.approx(expected, abs=1e-12)

    def test_window_mismatch_rejected(self, rng):
        part = AgePartition((50.0,))
        intensity = random_intensity(rng, 2, part)
        em = EmissionModel(
            rates=np.array([[1.0], [1.0]]),
            grade_probs=(np.array([[0.5, 0.5], [0.5, 0.5]]),),
            grade_priors=(np.ones((2, 2)),),
        )
        traj = LatentTrajectory.from_path(20.0, 28.0, (), (0,), 2)
        from screenhmm.model import make_visit

        seq = ScreeningSequence(
            visits=(make_visit(30.0, np.array([0]), (np.zeros(2, dtype=int),)),),
            censor_age=31.0,
            censor_outcome="alive",
        )
        with pytest.raises(ValueError):
            complete_log_likelihood(intensity, em, traj, seq)

    def test_importance_sampling_recovers_interval_transition(self):
        # paths drawn under a proposal intensity, reweighted by the exact
        # complete likelihood ratio, must reproduce the marginal transition
        # probabilities: a direct check that CL marginalizes to the kernel
        target = chain_3state()
        part = target.partition
        proposal_q = np.array(
            [[-0.9, 0.6, 0.3], [0.4, -0.8, 0.4], [0.3, 0.3, -0.6]]
        )
        proposal = PiecewiseIntensity(
            partition=part,
            segments=tuple(proposal_q for _ in range(part.n_segments)),
            allowed=target.allowed,
        )
        em = EmissionModel(
            rates=np.zeros((3, 1)),
            grade_probs=(np.full((3, 2), 0.5),),
            grade_priors=(np.ones((3, 2)),),
        )
        a, b = 10.0, 13.0
        n = 40_000
        rng = np.random.default_rng(77)
        seq = empty_sequence(b)
        weights = np.zeros((n,))
        ends = np.zeros(n, dtype=int)
        for i in range(n):
            traj = simulate_trajectory(proposal, 0, a, b, rng)
            log_w = complete_log_likelihood(
                target, em, traj, seq
            ) - complete_log_likelihood(proposal, em, traj, seq)
            weights[i] = math.exp(log_w)
            ends[i] = traj.states[-1]
        p_ref = interval_transition(target, a, b).entries[0]
        for j in range(3):
            est = weights * (ends == j)
            mean = est.mean()
            se = est.std(ddof=1) / math.sqrt(n)
            assert abs(mean - p_ref[j]) <= 3 * se + 1e-9
