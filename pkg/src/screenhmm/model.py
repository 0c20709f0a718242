"""Domain types for hierarchical Markov jump-process screening models.

The population is split into Z latent frailty classes.  Each class owns a
continuous-time Markov jump process over M_z disease states whose intensity
matrix is piecewise constant on a shared age partition, plus an
age-segment-dependent initial state distribution.  Visits emit Poisson test
counts and Multinomial grade histograms conditioned on the latent state;
follow-up ends with a dead/alive censoring record.

Constructors enforce structural well-formedness (shapes, orderings).
Numerical invariants (row sums, simplex normalization, sign constraints)
are reported by :func:`validate_model` so that deliberately broken models
can be constructed and diagnosed in tests and data pipelines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ALIVE = "alive"
DEATH = "death"

#: Age cut points (years) used throughout the cervical-screening setting:
#: segments [0, 23), [23, 30), [30, 60), [60, inf).
DEFAULT_AGE_CUTS = (23.0, 30.0, 60.0)

_ATOL_SIMPLEX = 1e-12
_ATOL_ROWSUM = 1e-12


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


def _readonly_int(a) -> np.ndarray:
    out = np.array(a, dtype=np.int64)
    out.setflags(write=False)
    return out


def _readonly_bool(a) -> np.ndarray:
    out = np.array(a, dtype=bool)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class AgePartition:
    """Disjoint age segments [0, c_1), [c_1, c_2), ..., [c_I, inf).

    ``cuts`` holds the interior cut points; the leading 0 and the unbounded
    final segment are implicit, so ``n_segments == len(cuts) + 1``.
    """

    cuts: tuple[float, ...]

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        if any(not np.isfinite(c) for c in cuts):
            raise ValueError("partition cuts must be finite")
        if any(c <= 0 for c in cuts):
            raise ValueError("partition cuts must be positive (0 is implicit)")
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ValueError("partition cuts must be strictly increasing")
        object.__setattr__(self, "cuts", cuts)

    @property
    def n_segments(self) -> int:
        return len(self.cuts) + 1

    def segment_index(self, age: float) -> int:
        """Index k of the unique segment containing ``age`` (0-based)."""
        if age < 0:
            raise ValueError(f"age must be nonnegative, got {age}")
        return int(np.searchsorted(self.cuts, age, side="right"))

    def segment_bounds(self, k: int) -> tuple[float, float]:
        """(lower, upper) of segment k; upper is inf for the last segment."""
        if not 0 <= k < self.n_segments:
            raise IndexError(f"segment index {k} out of range")
        lo = 0.0 if k == 0 else self.cuts[k - 1]
        hi = np.inf if k == len(self.cuts) else self.cuts[k]
        return lo, hi

    def pieces(self, from_age: float, to_age: float) -> list[tuple[int, float]]:
        """Split [from_age, to_age) at cut points.

        Returns (segment index, duration) pairs in age order; empty when
        the interval has zero length.
        """
        if from_age < 0:
            raise ValueError(f"from_age must be nonnegative, got {from_age}")
        if to_age < from_age:
            raise ValueError(f"empty interval: from_age {from_age} > to_age {to_age}")
        out = []
        a = from_age
        k = self.segment_index(a)
        while a < to_age:
            _, hi = self.segment_bounds(k)
            b = min(hi, to_age)
            out.append((k, b - a))
            a = b
            k += 1
        return out


def segment_index(partition: AgePartition, age: float) -> int:
    """Functional alias for :meth:`AgePartition.segment_index`."""
    return partition.segment_index(age)


@dataclass(frozen=True, eq=False)
class PiecewiseIntensity:
    """Per-segment intensity matrices of one class's jump process.

    ``segments[k]`` is the M x M generator active on age segment k;
    ``allowed`` masks which off-diagonal entries may be nonzero (the
    transition graph).  Row sums are zero and off-diagonal entries are
    nonnegative for a valid generator; see :func:`intensity_violations`.
    """

    partition: AgePartition
    segments: tuple[np.ndarray, ...]
    allowed: np.ndarray

    def __post_init__(self):
        segs = tuple(_readonly(s) for s in self.segments)
        if len(segs) != self.partition.n_segments:
            raise ValueError(
                f"expected {self.partition.n_segments} segment matrices, got {len(segs)}"
            )
        m = segs[0].shape[0]
        for s in segs:
            if s.shape != (m, m):
                raise ValueError("all segment matrices must be square with equal size")
        allowed = _readonly_bool(self.allowed)
        if allowed.shape != (m, m):
            raise ValueError("allowed mask shape must match segment matrices")
        if np.any(np.diag(allowed)):
            raise ValueError("diagonal of allowed mask must be False")
        object.__setattr__(self, "segments", segs)
        object.__setattr__(self, "allowed", allowed)

    @property
    def n_states(self) -> int:
        return self.segments[0].shape[0]

    def matrix_at(self, age: float) -> np.ndarray:
        return self.segments[self.partition.segment_index(age)]


@dataclass(frozen=True, eq=False)
class EmissionModel:
    """Visit-level observation model shared by all states of a class.

    Per state s and test type k the visit yields a Poisson(rates[s, k])
    test count and, conditional on the count, a Multinomial grade
    histogram with probabilities ``grade_probs[k][s]``.  ``grade_priors``
    are Dirichlet concentrations used as MAP regularizers during training.
    ``death_state`` marks the absorbing death state (None when the model
    has no mortality, e.g. single-state toys).
    """

    rates: np.ndarray                      # (M, K)
    grade_probs: tuple[np.ndarray, ...]    # K arrays of shape (M, L_k)
    grade_priors: tuple[np.ndarray, ...]   # K arrays of shape (M, L_k)
    death_state: Optional[int] = None

    def __post_init__(self):
        rates = _readonly(self.rates)
        if rates.ndim != 2:
            raise ValueError("rates must be a (states, test types) matrix")
        m, k = rates.shape
        probs = tuple(_readonly(p) for p in self.grade_probs)
        priors = tuple(_readonly(p) for p in self.grade_priors)
        if len(probs) != k or len(priors) != k:
            raise ValueError("grade_probs/grade_priors must have one array per test type")
        for p, a in zip(probs, priors):
            if p.ndim != 2 or p.shape[0] != m or a.shape != p.shape:
                raise ValueError("grade arrays must be (states, levels) and aligned")
        if self.death_state is not None and not 0 <= self.death_state < m:
            raise ValueError(f"death_state {self.death_state} out of range for {m} states")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "grade_probs", probs)
        object.__setattr__(self, "grade_priors", priors)

    @property
    def n_states(self) -> int:
        return self.rates.shape[0]

    @property
    def n_tests(self) -> int:
        return self.rates.shape[1]

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(p.shape[1] for p in self.grade_probs)


@dataclass(frozen=True, eq=False)
class ClassComponent:
    """One frailty class: dynamics, initial distribution, emissions.

    ``initial[k]`` is the state distribution of individuals whose first
    visit falls in age segment k; ``initial_priors`` are the matching
    Dirichlet concentrations.  ``normal_state`` is the state a treated
    individual is deterministically reset to.
    """

    intensity: PiecewiseIntensity
    initial: np.ndarray          # (I, M)
    initial_priors: np.ndarray   # (I, M)
    emission: EmissionModel
    normal_state: int = 0

    def __post_init__(self):
        m = self.intensity.n_states
        i = self.intensity.partition.n_segments
        initial = _readonly(self.initial)
        priors = _readonly(self.initial_priors)
        if initial.shape != (i, m):
            raise ValueError(f"initial table must be ({i}, {m}), got {initial.shape}")
        if priors.shape != (i, m):
            raise ValueError(f"initial_priors must be ({i}, {m}), got {priors.shape}")
        if self.emission.n_states != m:
            raise ValueError("emission model state count must match intensity")
        if not 0 <= self.normal_state < m:
            raise ValueError(f"normal_state {self.normal_state} out of range")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "initial_priors", priors)

    @property
    def n_states(self) -> int:
        return self.intensity.n_states

    @property
    def partition(self) -> AgePartition:
        return self.intensity.partition

    @property
    def death_state(self) -> Optional[int]:
        return self.emission.death_state


@dataclass(frozen=True, eq=False)
class HierarchicalModel:
    """Mixture of per-class jump processes with a categorical class prior."""

    class_prior: np.ndarray
    classes: tuple[ClassComponent, ...]

    def __post_init__(self):
        prior = _readonly(self.class_prior)
        classes = tuple(self.classes)
        if prior.ndim != 1 or len(classes) != prior.shape[0]:
            raise ValueError("class_prior length must equal the number of classes")
        if not classes:
            raise ValueError("at least one class is required")
        p0 = classes[0].partition
        for c in classes[1:]:
            if c.partition.cuts != p0.cuts:
                raise ValueError("all classes must share the same age partition")
        object.__setattr__(self, "class_prior", prior)
        object.__setattr__(self, "classes", classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def partition(self) -> AgePartition:
        return self.classes[0].partition

    @property
    def shared_emission(self) -> bool:
        em = self.classes[0].emission
        return all(c.emission is em for c in self.classes)


@dataclass(frozen=True, eq=False)
class Visit:
    """One screening visit: per-test counts and grade histograms."""

    age: float
    counts: np.ndarray                  # (K,) nonnegative ints
    results: tuple[np.ndarray, ...]     # K histograms, results[k] sums to counts[k]
    treated: bool = False

    def __post_init__(self):
        counts = _readonly_int(self.counts)
        results = tuple(_readonly_int(r) for r in self.results)
        if counts.ndim != 1 or len(results) != counts.shape[0]:
            raise ValueError("need one grade histogram per test type")
        if self.age < 0:
            raise ValueError(f"visit age must be nonnegative, got {self.age}")
        object.__setattr__(self, "age", float(self.age))
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "results", results)

    @property
    def n_tests(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True, eq=False)
class ScreeningSequence:
    """One individual's ordered visits plus the terminal censoring record."""

    visits: tuple[Visit, ...]
    censor_age: float
    censor_outcome: str
    sequence_id: Optional[str] = None

    def __post_init__(self):
        visits = tuple(self.visits)
        ages = [v.age for v in visits]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError("visit ages must be strictly increasing")
        if visits and self.censor_age < visits[-1].age:
            raise ValueError("censor_age must be >= the last visit age")
        if self.censor_outcome not in (ALIVE, DEATH):
            raise ValueError(f"censor_outcome must be {ALIVE!r} or {DEATH!r}")
        object.__setattr__(self, "visits", visits)
        object.__setattr__(self, "censor_age", float(self.censor_age))

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    @property
    def ages(self) -> np.ndarray:
        return np.array([v.age for v in self.visits])

    @property
    def treated_flags(self) -> np.ndarray:
        return np.array([v.treated for v in self.visits], dtype=bool)


@dataclass(frozen=True)
class EMConfig:
    """Training configuration.

    ``em_iterations == 0`` is allowed and makes fitting a no-op that
    returns the initial model.
    """

    em_iterations: int = 100
    lbfgs_iterations: int = 8
    lbfgs_memory: int = 10
    cluster_size: int = 100
    convergence_tolerance: float = 1e-6
    rng_seed: int = 0
    optimize_class_prior: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.em_iterations < 0:
            raise ValueError("em_iterations must be >= 0")
        if self.lbfgs_iterations < 1 or self.lbfgs_memory < 1 or self.cluster_size < 1:
            raise ValueError("lbfgs_iterations, lbfgs_memory and cluster_size must be >= 1")
        if self.convergence_tolerance <= 0:
            raise ValueError("convergence_tolerance must be > 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass(frozen=True)
class TopologySpec:
    """Structural description of a model, used to initialize training.

    ``allowed`` may be None, in which case every off-diagonal transition is
    permitted except out of the death state.
    """

    n_states: tuple[int, ...]              # per class, death included
    partition: AgePartition
    test_levels: tuple[int, ...]           # L_k per test type
    class_prior: tuple[float, ...]
    allowed: Optional[tuple[np.ndarray, ...]] = None
    death_state: Optional[int] = None      # same index in every class; None = no death
    normal_state: int = 0
    grade_prior: float = 1.0
    initial_prior: float = 1.0
    share_emission: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.n_states)

    def allowed_mask(self, z: int) -> np.ndarray:
        m = self.n_states[z]
        if self.allowed is not None:
            return np.asarray(self.allowed[z], dtype=bool)
        mask = ~np.eye(m, dtype=bool)
        if self.death_state is not None:
            mask[self.death_state, :] = False
        return mask


# ---------------------------------------------------------------------------
# Validation


def intensity_violations(q: np.ndarray, allowed: np.ndarray, where: str) -> list[str]:
    """Numeric generator invariants for a single segment matrix."""
    out = []
    m = q.shape[0]
    off = ~np.eye(m, dtype=bool)
    bad = off & (q < 0)
    for i, j in zip(*np.nonzero(bad)):
        out.append(f"{where}: negative off-diagonal intensity q[{i},{j}] = {q[i, j]}")
    bad = off & ~allowed & (q != 0)
    for i, j in zip(*np.nonzero(bad)):
        out.append(f"{where}: q[{i},{j}] nonzero but transition not allowed")
    rowsum = q.sum(axis=1)
    scale = np.maximum(1.0, np.abs(q).max(axis=1))
    for i in np.nonzero(np.abs(rowsum) > _ATOL_ROWSUM * scale)[0]:
        out.append(f"{where}: row {i} sums to {rowsum[i]}, expected 0")
    return out


def _simplex_violations(p: np.ndarray, where: str) -> list[str]:
    out = []
    if np.any(p < 0):
        out.append(f"{where}: negative probability entries")
    s = p.sum()
    if abs(s - 1.0) > _ATOL_SIMPLEX * max(1.0, p.shape[-1]):
        out.append(f"{where}: sums to {s}, expected 1")
    return out


def emission_violations(em: EmissionModel, where: str = "emission") -> list[str]:
    out = []
    if np.any(em.rates < 0):
        out.append(f"{where}.rates: negative Poisson rate")
    for k, (probs, priors) in enumerate(zip(em.grade_probs, em.grade_priors)):
        for s in range(em.n_states):
            out.extend(_simplex_violations(probs[s], f"{where}.grade_probs[{s}][{k}]"))
        if np.any(priors <= 0):
            out.append(f"{where}.grade_priors[test {k}]: concentrations must be > 0")
    return out


def validate_model(model: HierarchicalModel) -> list[str]:
    """All numeric invariant violations of the model; empty when valid."""
    out = _simplex_violations(model.class_prior, "class_prior")
    seen_emissions: list[int] = []
    for z, comp in enumerate(model.classes):
        q = comp.intensity
        for k, seg in enumerate(q.segments):
            out.extend(intensity_violations(seg, q.allowed, f"classes[{z}].intensity[{k}]"))
        death = comp.death_state
        if death is not None:
            for k, seg in enumerate(q.segments):
                if np.any(seg[death] != 0):
                    out.append(
                        f"classes[{z}].intensity[{k}]: death state row {death} must be zero"
                    )
        for k in range(comp.partition.n_segments):
            out.extend(_simplex_violations(comp.initial[k], f"classes[{z}].initial[{k}]"))
        if np.any(comp.initial_priors <= 0):
            out.append(f"classes[{z}].initial_priors: concentrations must be > 0")
        if id(comp.emission) not in seen_emissions:
            seen_emissions.append(id(comp.emission))
            label = "emission" if model.shared_emission else f"classes[{z}].emission"
            out.extend(emission_violations(comp.emission, label))
    return out


def sequence_violations(seq: ScreeningSequence, where: str = "sequence") -> list[str]:
    """Histogram/count consistency violations for one sequence."""
    out = []
    for t, v in enumerate(seq.visits):
        for k in range(v.n_tests):
            if np.any(v.results[k] < 0):
                out.append(f"{where}.visits[{t}]: negative grade count in test {k}")
            if v.results[k].sum() != v.counts[k]:
                out.append(
                    f"{where}.visits[{t}]: grade histogram of test {k} sums to "
                    f"{v.results[k].sum()}, expected {v.counts[k]}"
                )
        if np.any(v.counts < 0):
            out.append(f"{where}.visits[{t}]: negative test count")
    return out


def make_visit(age, counts, results, treated=False) -> Visit:
    """Visit constructor that checks histogram/count consistency."""
    v = Visit(age=age, counts=counts, results=results, treated=treated)
    for k in range(v.n_tests):
        if v.results[k].sum() != v.counts[k]:
            raise ValueError(
                f"grade histogram of test {k} sums to {v.results[k].sum()}, "
                f"expected {v.counts[k]}"
            )
    return v
