"""Parameter transform round trips and structural-parameter handling."""

import numpy as np
import pytest

from screenhmm.params import ParameterPacker
from conftest import random_model


class TestRoundTrips:
    @pytest.mark.parametrize("death,shared", [(None, True), (2, True), (2, False)])
    def test_model_vector_model(self, rng, death, shared):
        model = random_model(rng, z=2, m=3, death=death, share_emission=shared)
        packer = ParameterPacker(model)
        vec = packer.pack(model)
        other = packer.unpack(vec)
        for a, b in zip(model.classes, other.classes):
            for sa, sb in zip(a.intensity.segments, b.intensity.segments):
                np.testing.assert_allclose(sb, sa, rtol=1e-13, atol=1e-15)
            np.testing.assert_allclose(b.initial, a.initial, rtol=1e-13, atol=1e-15)
            np.testing.assert_allclose(
                b.emission.rates, a.emission.rates, rtol=1e-13, atol=1e-15
            )
            for k in range(a.emission.n_tests):
                np.testing.assert_allclose(
                    b.emission.grade_probs[k],
                    a.emission.grade_probs[k],
                    rtol=1e-13,
                    atol=1e-15,
                )
        np.testing.assert_allclose(other.class_prior, model.class_prior, atol=0)

    def test_vector_model_vector(self, rng):
        model = random_model(rng, z=2, m=3, death=2)
        packer = ParameterPacker(model, optimize_class_prior=True)
        vec = rng.normal(scale=0.8, size=packer.n_params)
        back = packer.pack(packer.unpack(vec))
        np.testing.assert_allclose(back, vec, rtol=1e-12, atol=1e-13)

    def test_unpack_always_yields_valid_model(self, rng):
        from screenhmm.model import validate_model

        model = random_model(rng, z=2, m=4, death=3)
        packer = ParameterPacker(model, optimize_class_prior=True)
        for _ in range(5):
            vec = rng.normal(scale=3.0, size=packer.n_params)
            assert validate_model(packer.unpack(vec)) == []

    def test_shared_emission_preserved(self, rng):
        model = random_model(rng, z=2, m=3, death=2, share_emission=True)
        packer = ParameterPacker(model)
        other = packer.unpack(packer.pack(model))
        assert other.shared_emission
        model2 = random_model(rng, z=2, m=3, death=2, share_emission=False)
        packer2 = ParameterPacker(model2)
        assert not packer2.unpack(packer2.pack(model2)).shared_emission
        assert packer2.n_params > packer.n_params


class TestStructuralParameters:
    def test_masked_entries_stay_zero(self, rng):
        model = random_model(rng, z=1, m=3, death=2)
        packer = ParameterPacker(model)
        other = packer.unpack(rng.normal(size=packer.n_params))
        q = other.classes[0].intensity
        assert np.all(q.segments[0][~q.allowed & ~np.eye(3, dtype=bool)] == 0)
        assert np.all(q.segments[0][2] == 0)  # death row

    def test_death_emission_row_fixed(self, rng):
        model = random_model(rng, z=1, m=3, death=2)
        packer = ParameterPacker(model)
        other = packer.unpack(rng.normal(size=packer.n_params))
        np.testing.assert_array_equal(
            other.classes[0].emission.rates[2], model.classes[0].emission.rates[2]
        )

    def test_nonzero_death_initial_rejected(self, rng):
        from screenhmm.model import ClassComponent, HierarchicalModel

        model = random_model(rng, z=1, m=3, death=2)
        comp = model.classes[0]
        bad_initial = np.full((comp.partition.n_segments, 3), 1.0 / 3)
        bad = HierarchicalModel(
            class_prior=model.class_prior,
            classes=(
                ClassComponent(
                    intensity=comp.intensity,
                    initial=bad_initial,
                    initial_priors=comp.initial_priors,
                    emission=comp.emission,
                ),
            ),
        )
        with pytest.raises(ValueError, match="death"):
            ParameterPacker(bad)

    def test_zero_entries_cannot_pack(self, rng):
        from screenhmm.model import ClassComponent, HierarchicalModel, PiecewiseIntensity

        model = random_model(rng, z=1, m=2)
        comp = model.classes[0]
        seg = np.array(comp.intensity.segments[0])
        i, j = np.nonzero(comp.intensity.allowed)
        seg[i[0], j[0]] = 0.0
        seg[i[0], i[0]] -= seg[i[0], :].sum() - seg[i[0], i[0]]
        np.fill_diagonal(seg, 0.0)
        np.fill_diagonal(seg, -seg.sum(axis=1))
        bad_int = PiecewiseIntensity(
            partition=comp.partition,
            segments=(seg,) + comp.intensity.segments[1:],
            allowed=comp.intensity.allowed,
        )
        bad = HierarchicalModel(
            class_prior=model.class_prior,
            classes=(
                ClassComponent(
                    intensity=bad_int,
                    initial=comp.initial,
                    initial_priors=comp.initial_priors,
                    emission=comp.emission,
                ),
            ),
        )
        packer = ParameterPacker(bad)
        with pytest.raises(ValueError, match="strictly positive"):
            packer.pack(bad)

    def test_labels_cover_every_coordinate(self, rng):
        model = random_model(rng, z=2, m=3, death=2)
        packer = ParameterPacker(model, optimize_class_prior=True)
        labels = packer.coordinate_labels()
        assert len(labels) == packer.n_params
        assert all(labels)
        assert len(set(labels)) == packer.n_params
