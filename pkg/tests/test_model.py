"""Domain types: partitions, invariants, validation, persistence round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenhmm.io import model_from_dict, model_to_dict
from screenhmm.model import (
    DEFAULT_AGE_CUTS,
    AgePartition,
    ClassComponent,
    EMConfig,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
    Visit,
    make_visit,
    segment_index,
    validate_model,
)
from conftest import random_model


class TestAgePartition:
    def test_default_partition_examples(self):
        part = AgePartition(DEFAULT_AGE_CUTS)
        assert part.n_segments == 4
        assert part.segment_index(25.0) == 1      # second segment, [23, 30)
        assert part.segment_index(0.0) == 0
        assert part.segment_index(75.0) == 3      # unbounded tail segment

    def test_left_boundaries_belong_to_upper_segment(self):
        part = AgePartition(DEFAULT_AGE_CUTS)
        assert part.segment_index(23.0) == 1
        assert part.segment_index(60.0) == 3

    def test_negative_age_rejected(self):
        part = AgePartition(DEFAULT_AGE_CUTS)
        with pytest.raises(ValueError):
            part.segment_index(-0.5)

    def test_malformed_cuts_rejected(self):
        with pytest.raises(ValueError):
            AgePartition((30.0, 23.0))
        with pytest.raises(ValueError):
            AgePartition((0.0, 23.0))
        with pytest.raises(ValueError):
            AgePartition((np.inf,))

    def test_segment_index_total_and_consistent(self):
        part = AgePartition((11.0, 29.5, 60.0, 82.0))
        bounds = [part.segment_bounds(k) for k in range(part.n_segments)]
        rng = np.random.default_rng(7)
        ages = rng.uniform(0.0, 120.0, size=100_000)
        for age in ages:
            k = part.segment_index(age)
            lo, hi = bounds[k]
            assert lo <= age < hi
        assert segment_index(part, 11.0) == part.segment_index(11.0)

    @settings(max_examples=100, deadline=None)
    @given(
        a=st.floats(min_value=0.0, max_value=200.0, allow_nan=False),
        b=st.floats(min_value=0.0, max_value=200.0, allow_nan=False),
    )
    def test_pieces_cover_interval(self, a, b):
        part = AgePartition(DEFAULT_AGE_CUTS)
        lo, hi = min(a, b), max(a, b)
        pieces = part.pieces(lo, hi)
        assert sum(dt for _, dt in pieces) == pytest.approx(hi - lo, abs=1e-9)
        ks = [k for k, _ in pieces]
        assert ks == sorted(ks)
        assert all(dt > 0 for _, dt in pieces)


class TestValidation:
    def test_well_formed_model_has_no_violations(self, rng):
        model = random_model(rng, z=2, m=3, death=2)
        assert validate_model(model) == []

    def test_negative_off_diagonal_named(self, rng):
        model = random_model(rng, z=1, m=3)
        seg0 = np.array(model.classes[0].intensity.segments[0])
        seg0[0, 1] = -0.2
        bad = PiecewiseIntensity(
            partition=model.partition,
            segments=(seg0,) + model.classes[0].intensity.segments[1:],
            allowed=model.classes[0].intensity.allowed,
        )
        comp = model.classes[0]
        model2 = HierarchicalModel(
            class_prior=model.class_prior,
            classes=(
                ClassComponent(
                    intensity=bad,
                    initial=comp.initial,
                    initial_priors=comp.initial_priors,
                    emission=comp.emission,
                ),
            ),
        )
        violations = validate_model(model2)
        assert any("q[0,1]" in v for v in violations)

    def test_unnormalized_class_prior_named(self, rng):
        model = random_model(rng, z=2, m=2)
        model2 = HierarchicalModel(
            class_prior=np.array([0.4, 0.5]), classes=model.classes
        )
        violations = validate_model(model2)
        assert any("class_prior" in v for v in violations)

    def test_death_row_must_be_zero(self, rng):
        model = random_model(rng, z=1, m=3)
        comp = model.classes[0]
        em = EmissionModel(
            rates=comp.emission.rates,
            grade_probs=comp.emission.grade_probs,
            grade_priors=comp.emission.grade_priors,
            death_state=2,
        )
        model2 = HierarchicalModel(
            class_prior=model.class_prior,
            classes=(
                ClassComponent(
                    intensity=comp.intensity,
                    initial=comp.initial,
                    initial_priors=comp.initial_priors,
                    emission=em,
                ),
            ),
        )
        violations = validate_model(model2)
        assert any("death state row" in v for v in violations)


class TestSequences:
    def test_visit_age_ordering_enforced(self):
        v1 = make_visit(25.0, np.array([0]), (np.zeros(2, dtype=int),))
        v2 = make_visit(24.0, np.array([0]), (np.zeros(2, dtype=int),))
        with pytest.raises(ValueError):
            ScreeningSequence(visits=(v1, v2), censor_age=26.0, censor_outcome="alive")

    def test_censor_age_after_last_visit(self):
        v = make_visit(25.0, np.array([0]), (np.zeros(2, dtype=int),))
        with pytest.raises(ValueError):
            ScreeningSequence(visits=(v,), censor_age=24.0, censor_outcome="alive")

    def test_histogram_must_match_counts(self):
        with pytest.raises(ValueError):
            make_visit(25.0, np.array([2]), (np.array([1, 0]),))

    def test_valid_visit(self):
        v = make_visit(25.0, np.array([2]), (np.array([1, 1]),), treated=True)
        assert v.treated and v.counts[0] == 2


class TestEMConfig:
    def test_defaults(self):
        cfg = EMConfig()
        assert cfg.em_iterations == 100
        assert cfg.lbfgs_iterations == 8
        assert cfg.cluster_size == 100

    def test_zero_em_iterations_allowed(self):
        assert EMConfig(em_iterations=0).em_iterations == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"em_iterations": -1},
            {"lbfgs_iterations": 0},
            {"cluster_size": 0},
            {"convergence_tolerance": 0.0},
            {"workers": 0},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ValueError):
            EMConfig(**kwargs)


class TestPersistenceRoundTrip:
    @pytest.mark.parametrize("death,shared", [(2, True), (None, False)])
    def test_round_trip_preserves_fields(self, rng, death, shared):
        model = random_model(rng, z=2, m=3, death=death, share_emission=shared)
        other = model_from_dict(model_to_dict(model))
        np.testing.assert_allclose(other.class_prior, model.class_prior, atol=1e-12)
        assert other.partition.cuts == model.partition.cuts
        assert other.shared_emission == model.shared_emission
        for a, b in zip(model.classes, other.classes):
            for sa, sb in zip(a.intensity.segments, b.intensity.segments):
                np.testing.assert_allclose(sb, sa, atol=1e-12)
            np.testing.assert_array_equal(b.intensity.allowed, a.intensity.allowed)
            np.testing.assert_allclose(b.initial, a.initial, atol=1e-12)
            np.testing.assert_allclose(b.initial_priors, a.initial_priors, atol=1e-12)
            assert b.normal_state == a.normal_state
            assert b.emission.death_state == a.emission.death_state
            np.testing.assert_allclose(b.emission.rates, a.emission.rates, atol=1e-12)
            for k in range(a.emission.n_tests):
                np.testing.assert_allclose(
                    b.emission.grade_probs[k], a.emission.grade_probs[k], atol=1e-12
                )
                np.testing.assert_allclose(
                    b.emission.grade_priors[k], a.emission.grade_priors[k], atol=1e-12
                )

    def test_round_trip_valid(self, rng):
        model = random_model(rng, z=2, m=4, death=3)
        assert validate_model(model_from_dict(model_to_dict(model))) == []
