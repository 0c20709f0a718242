"""Shared builders for randomized but reproducible test models and data."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from screenhmm.model import (
    AgePartition,
    ClassComponent,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
    Visit,
)


def random_intensity(rng, m, partition, death=None, scale=0.5):
    """Random generator matrices on a partition; death row zeroed."""
    allowed = ~np.eye(m, dtype=bool)
    if death is not None:
        allowed[death, :] = False
    segs = []
    for _ in range(partition.n_segments):
        q = np.zeros((m, m))
        q[allowed] = rng.uniform(0.05, scale, size=int(allowed.sum()))
        np.fill_diagonal(q, -q.sum(axis=1))
        segs.append(q)
    return PiecewiseIntensity(partition=partition, segments=tuple(segs), allowed=allowed)


def random_emission(rng, m, levels=(3, 2), death=None, rate_hi=2.0):
    k_n = len(levels)
    rates = rng.uniform(0.3, rate_hi, size=(m, k_n))
    if death is not None:
        rates[death] = 0.0
    probs, priors = [], []
    for l in levels:
        p = rng.dirichlet(np.ones(l), size=m)
        if death is not None:
            p[death] = 1.0 / l
        probs.append(p)
        priors.append(np.full((m, l), 1.0))
    return EmissionModel(
        rates=rates,
        grade_probs=tuple(probs),
        grade_priors=tuple(priors),
        death_state=death,
    )


def random_component(rng, m, partition, death=None, levels=(3, 2), emission=None):
    intensity = random_intensity(rng, m, partition, death)
    initial = rng.dirichlet(np.ones(m if death is None else m - 1),
                            size=partition.n_segments)
    if death is not None:
        full = np.zeros((partition.n_segments, m))
        keep = [s for s in range(m) if s != death]
        full[:, keep] = initial
        initial = full
    return ClassComponent(
        intensity=intensity,
        initial=initial,
        initial_priors=np.ones((partition.n_segments, m)),
        emission=emission if emission is not None else random_emission(
            rng, m, levels, death
        ),
        normal_state=0,
    )


def random_model(rng, z=2, m=3, partition=None, death=None, levels=(3, 2),
                 share_emission=True, class_prior=None):
    partition = partition or AgePartition((30.0, 50.0))
    emission = random_emission(rng, m, levels, death) if share_emission else None
    classes = tuple(
        random_component(rng, m, partition, death, levels, emission)
        for _ in range(z)
    )
    if class_prior is None:
        class_prior = rng.dirichlet(np.ones(z) * 5)
    return HierarchicalModel(class_prior=np.asarray(class_prior), classes=classes)


def random_visit(rng, age, em, state=None, treated=False):
    m = em.n_states
    state = int(rng.integers(m)) if state is None else state
    counts = rng.poisson(np.maximum(em.rates[state], 0.0))
    results = []
    for k in range(em.n_tests):
        if counts[k] > 0:
            results.append(rng.multinomial(counts[k], em.grade_probs[k][state]))
        else:
            results.append(np.zeros(em.grade_probs[k].shape[1], dtype=np.int64))
    return Visit(age=float(age), counts=counts, results=tuple(results), treated=treated)


def random_sequence(rng, em, t_n=4, first_age=25.0, treat_prob=0.0,
                    outcome=None):
    ages = first_age + np.concatenate([[0.0], np.cumsum(rng.uniform(0.5, 4.0, t_n - 1))])
    visits = [
        random_visit(rng, a, em, treated=bool(rng.random() < treat_prob)) for a in ages
    ]
    if outcome is None:
        outcome = "death" if (em.death_state is not None and rng.random() < 0.25) else "alive"
    return ScreeningSequence(
        visits=tuple(visits),
        censor_age=float(ages[-1] + rng.uniform(0.0, 3.0)),
        censor_outcome=outcome,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(2026)
