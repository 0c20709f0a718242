"""Generative sampling of latent trajectories and synthetic screening data.

Holding times are exponential within a partition segment; a draw that
crosses a cut point is re-issued from the boundary under the next
segment's rates, which is exact by memorylessness.  Treated visits reset
the latent state to the class's normal state immediately after the
visit's emission; such resets are deterministic and excluded from the
rate-jump counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import (
    ALIVE,
    DEATH,
    ClassComponent,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
    Visit,
    _readonly,
    _readonly_int,
)
from .emissions import sample_visit, visit_loglik_vector


@dataclass(frozen=True, eq=False)
class LatentTrajectory:
    """Continuous-time state path on [start_age, end_age].

    ``states[i]`` holds on [jump_ages[i-1], jump_ages[i]) with the obvious
    boundary conventions; ``reset_ages`` marks which jumps are treatment
    resets.  ``occupancy`` (time per state) and ``jump_counts`` (rate-driven
    jumps per ordered pair) summarize the path over the whole window.
    """

    start_age: float
    end_age: float
    jump_ages: tuple[float, ...]
    states: tuple[int, ...]
    n_states: int
    reset_ages: tuple[float, ...]
    occupancy: np.ndarray     # (M,)
    jump_counts: np.ndarray   # (M, M)

    def __post_init__(self):
        if len(self.states) != len(self.jump_ages) + 1:
            raise ValueError("need exactly one more state than jump ages")
        ages = self.jump_ages
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError("jump ages must be strictly increasing")
        if ages and (ages[0] < self.start_age or ages[-1] > self.end_age):
            raise ValueError("jump ages must lie inside the window")
        if any(a == b for a, b in zip(self.states, self.states[1:])):
            raise ValueError("consecutive states must differ")
        object.__setattr__(self, "occupancy", _readonly(self.occupancy))
        object.__setattr__(self, "jump_counts", _readonly(self.jump_counts))

    @classmethod
    def from_path(cls, start_age, end_age, jump_ages, states, n_states, reset_ages=()):
        occ, counts = path_statistics(
            start_age, end_age, jump_ages, states, n_states, reset_ages
        )
        return cls(
            start_age=float(start_age),
            end_age=float(end_age),
            jump_ages=tuple(float(a) for a in jump_ages),
            states=tuple(int(s) for s in states),
            n_states=int(n_states),
            reset_ages=tuple(float(a) for a in reset_ages),
            occupancy=occ,
            jump_counts=counts,
        )

    def state_at(self, age: float) -> int:
        """State at ``age``; at a jump age, the post-jump state."""
        if not self.start_age <= age <= self.end_age:
            raise ValueError(f"age {age} outside window [{self.start_age}, {self.end_age}]")
        return self.states[int(np.searchsorted(self.jump_ages, age, side="right"))]

    def state_before(self, age: float) -> int:
        """State just before ``age``: pre-jump when a jump sits exactly there."""
        if not self.start_age <= age <= self.end_age:
            raise ValueError(f"age {age} outside window [{self.start_age}, {self.end_age}]")
        return self.states[int(np.searchsorted(self.jump_ages, age, side="left"))]


def path_statistics(start_age, end_age, jump_ages, states, n_states, reset_ages=()):
    """Occupancy times and rate-jump counts implied by a jump path."""
    resets = set(float(a) for a in reset_ages)
    occ = np.zeros(n_states)
    counts = np.zeros((n_states, n_states))
    bounds = [float(start_age), *map(float, jump_ages), float(end_age)]
    for i, s in enumerate(states):
        occ[s] += bounds[i + 1] - bounds[i]
    for i, age in enumerate(jump_ages):
        if float(age) not in resets:
            counts[states[i], states[i + 1]] += 1
    return occ, counts


def _advance(
    intensity: PiecewiseIntensity,
    state: int,
    from_age: float,
    to_age: float,
    rng: np.random.Generator,
    jump_ages: list[float],
    states: list[int],
) -> int:
    """Simulate the jump process on [from_age, to_age); returns the end state."""
    part = intensity.partition
    age = from_age
    while age < to_age:
        k = part.segment_index(age)
        q = intensity.segments[k]
        rate = -q[state, state]
        _, seg_hi = part.segment_bounds(k)
        horizon = min(seg_hi, to_age)
        if rate <= 0:
            age = horizon
            continue
        wait = rng.exponential(1.0 / rate)
        if age + wait >= horizon:
            # crossed a segment boundary (or the window end): re-draw there
            age = horizon
            continue
        age = age + wait
        probs = q[state].copy()
        probs[state] = 0.0
        probs /= rate
        state = int(rng.choice(len(probs), p=probs))
        jump_ages.append(age)
        states.append(state)
    return state


def simulate_trajectory(
    intensity: PiecewiseIntensity,
    initial_state: int,
    start_age: float,
    end_age: float,
    rng: np.random.Generator,
) -> LatentTrajectory:
    """Sample a latent path of the jump process on [start_age, end_age]."""
    if not 0 <= initial_state < intensity.n_states:
        raise ValueError(f"initial state {initial_state} out of range")
    if start_age >= end_age:
        raise ValueError("start_age must be < end_age")
    jump_ages: list[float] = []
    states = [int(initial_state)]
    _advance(intensity, initial_state, start_age, end_age, rng, jump_ages, states)
    return LatentTrajectory.from_path(
        start_age, end_age, jump_ages, states, intensity.n_states
    )


def simulate_sequence(
    model: HierarchicalModel,
    visit_ages: Sequence[float],
    censor_age: float,
    rng: np.random.Generator,
    treated: Optional[Sequence[bool]] = None,
) -> tuple[int, LatentTrajectory, ScreeningSequence]:
    """Draw (class, latent trajectory, observed sequence) for one individual.

    The class is drawn from the prior, the initial state from the class's
    initial distribution at the first visit's age segment, and the path is
    simulated to ``censor_age``.  Each visit emits counts and grades from
    the state at its age; treated visits then reset the state to
    ``normal_state``.  The censor outcome is death exactly when the path
    is in the death state at ``censor_age``.
    """
    ages = [float(a) for a in visit_ages]
    if not ages:
        raise ValueError("at least one visit age is required")
    if any(b <= a for a, b in zip(ages, ages[1:])):
        raise ValueError("visit ages must be strictly increasing")
    if censor_age < ages[-1]:
        raise ValueError("censor_age must be >= the last visit age")
    flags = [False] * len(ages) if treated is None else [bool(f) for f in treated]
    if len(flags) != len(ages):
        raise ValueError("treated flags must align with visit ages")

    z = int(rng.choice(model.n_classes, p=model.class_prior))
    comp = model.classes[z]
    seg0 = comp.partition.segment_index(ages[0])
    state = int(rng.choice(comp.n_states, p=comp.initial[seg0]))

    jump_ages: list[float] = []
    states = [state]
    reset_ages: list[float] = []
    visits = []
    age = ages[0]
    for t, (a, flag) in enumerate(zip(ages, flags)):
        if t > 0:
            state = _advance(comp.intensity, state, age, a, rng, jump_ages, states)
            age = a
        counts, results = sample_visit(comp.emission, state, rng)
        visits.append(Visit(age=a, counts=counts, results=results, treated=flag))
        if flag and state != comp.normal_state and a < censor_age:
            state = comp.normal_state
            jump_ages.append(a)
            states.append(state)
            reset_ages.append(a)
    if censor_age > age:
        state = _advance(comp.intensity, state, age, censor_age, rng, jump_ages, states)

    outcome = DEATH if (comp.death_state is not None and state == comp.death_state) else ALIVE
    trajectory = LatentTrajectory.from_path(
        ages[0], censor_age, jump_ages, states, comp.n_states, reset_ages
    )
    seq = ScreeningSequence(
        visits=tuple(visits), censor_age=censor_age, censor_outcome=outcome
    )
    return z, trajectory, seq


@dataclass(frozen=True)
class SimulationSpec:
    """Cohort layout for synthetic data: visit schedule and censoring gaps.

    First-visit ages, inter-visit gaps and the gap from last visit to
    censoring are uniform on the given ranges; visit counts are uniform
    integers on ``visit_count`` inclusive.  ``treat_probability`` marks
    visits as treated independently (0 disables treatment).
    """

    cohort_size: int = 100
    first_age: tuple[float, float] = (23.0, 35.0)
    gap: tuple[float, float] = (1.0, 5.0)
    visit_count: tuple[int, int] = (4, 12)
    censor_gap: tuple[float, float] = (0.5, 3.0)
    treat_probability: float = 0.0

    def draw_schedule(self, rng: np.random.Generator):
        n = int(rng.integers(self.visit_count[0], self.visit_count[1] + 1))
        first = rng.uniform(*self.first_age)
        gaps = rng.uniform(self.gap[0], self.gap[1], size=n - 1)
        ages = first + np.concatenate([[0.0], np.cumsum(gaps)])
        censor = ages[-1] + rng.uniform(*self.censor_gap)
        if self.treat_probability > 0:
            treated = rng.random(n) < self.treat_probability
        else:
            treated = np.zeros(n, dtype=bool)
        return ages, float(censor), treated


def simulate_cohort(
    model: HierarchicalModel,
    spec: SimulationSpec,
    seed: int,
) -> tuple[list[ScreeningSequence], list[tuple[str, int, LatentTrajectory]]]:
    """Simulate a cohort; per-individual RNG streams keyed by index.

    Stream splitting makes the output independent of evaluation order, so
    parallel and sequential simulation agree for the same seed.
    """
    streams = np.random.SeedSequence(seed).spawn(spec.cohort_size)
    sequences = []
    truths = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        ages, censor, treated = spec.draw_schedule(rng)
        z, traj, seq = simulate_sequence(model, ages, censor, rng, treated)
        sid = f"sim{i:06d}"
        sequences.append(
            ScreeningSequence(
                visits=seq.visits,
                censor_age=seq.censor_age,
                censor_outcome=seq.censor_outcome,
                sequence_id=sid,
            )
        )
        truths.append((sid, z, traj))
    return sequences, truths


def complete_log_likelihood(
    intensity: PiecewiseIntensity,
    emission: EmissionModel,
    trajectory: LatentTrajectory,
    sequence: ScreeningSequence,
) -> float:
    """Exact joint log-likelihood of a latent path and its observations.

    Survival and jump terms use occupancy times and jump counts accumulated
    per partition segment (the rates are segment-dependent); treatment
    resets contribute no rate term.  Visit emissions are evaluated at the
    pre-reset state of the visit's age.
    """
    for v in sequence.visits:
        if not trajectory.start_age <= v.age <= trajectory.end_age:
            raise ValueError(
                f"visit at age {v.age} outside trajectory window "
                f"[{trajectory.start_age}, {trajectory.end_age}]"
            )
    part = intensity.partition
    resets = set(trajectory.reset_ages)
    total = 0.0
    bounds = [trajectory.start_age, *trajectory.jump_ages, trajectory.end_age]
    # survival: q[s, s] = -(total exit rate), split at partition cuts
    for i, s in enumerate(trajectory.states):
        for k, dt in part.pieces(bounds[i], bounds[i + 1]):
            total += intensity.segments[k][s, s] * dt
    # rate-driven jumps
    for i, age in enumerate(trajectory.jump_ages):
        if age in resets:
            continue
        k = part.segment_index(age)
        q = intensity.segments[k][trajectory.states[i], trajectory.states[i + 1]]
        with np.errstate(divide="ignore"):
            total += float(np.log(q))
    for v in sequence.visits:
        s = trajectory.state_before(v.age) if v.age in resets else trajectory.state_at(v.age)
        total += float(visit_loglik_vector(emission, v)[s])
    return total
