"""Visit-level observation likelihoods and sampling.

Given the latent state s, test counts are independent Poisson draws per
test type and the grade histogram of each test type is Multinomial given
its count.  Censoring contributes a transition-probability term into (or
away from) the death state over the gap between the last visit and the
censoring age.  Impossible observations yield -inf log-likelihoods rather
than errors so the forward recursion can handle them.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, xlogy

from .model import ALIVE, DEATH, ClassComponent, EmissionModel, ScreeningSequence, Visit
from .kernels import interval_transition


def visit_loglik_vector(em: EmissionModel, visit: Visit) -> np.ndarray:
    """Log-likelihood of one visit under every state, shape (M,)."""
    if visit.n_tests != em.n_tests:
        raise ValueError(
            f"visit has {visit.n_tests} test types, model expects {em.n_tests}"
        )
    counts = visit.counts.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (xlogy(counts[None, :], em.rates) - em.rates).sum(axis=1)
    out -= gammaln(counts + 1.0).sum()
    for k in range(em.n_tests):
        g = visit.results[k].astype(float)
        if g.shape[0] != em.grade_probs[k].shape[1]:
            raise ValueError(
                f"test {k}: histogram has {g.shape[0]} levels, model expects "
                f"{em.grade_probs[k].shape[1]}"
            )
        ek = counts[k]
        if ek > 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                out += xlogy(g[None, :], em.grade_probs[k]).sum(axis=1)
            out += gammaln(ek + 1.0) - gammaln(g + 1.0).sum()
    return out


def log_visit_likelihood(em: EmissionModel, state: int, visit: Visit) -> float:
    """log p(visit | state): Poisson counts times Multinomial grades."""
    if not 0 <= state < em.n_states:
        raise ValueError(f"state {state} out of range for {em.n_states} states")
    return float(visit_loglik_vector(em, visit)[state])


def sequence_loglik_table(em: EmissionModel, seq: ScreeningSequence) -> np.ndarray:
    """Per-visit, per-state log-likelihood table, shape (T, M)."""
    if seq.n_visits == 0:
        return np.zeros((0, em.n_states))
    return np.stack([visit_loglik_vector(em, v) for v in seq.visits])


def censor_loglik_vector(
    component: ClassComponent, last_visit_age: float, censor_age: float, outcome: str
) -> np.ndarray:
    """Censoring log-likelihood as a function of the state at the last visit.

    Dead-by-censoring uses the death-column transition probability over
    [last_visit_age, censor_age); alive uses its complement.  Models
    without a death state assign probability 1 to alive and 0 to death.
    """
    if censor_age < last_visit_age:
        raise ValueError("censor_age must be >= last_visit_age")
    if outcome not in (ALIVE, DEATH):
        raise ValueError(f"outcome must be {ALIVE!r} or {DEATH!r}")
    m = component.n_states
    death = component.death_state
    if death is None:
        return np.zeros(m) if outcome == ALIVE else np.full(m, -np.inf)
    p_death = interval_transition(
        component.intensity, last_visit_age, censor_age
    ).entries[:, death]
    p_death = np.clip(p_death, 0.0, 1.0)
    with np.errstate(divide="ignore"):
        if outcome == DEATH:
            return np.log(p_death)
        return np.log1p(-p_death)


def log_censor_likelihood(
    component: ClassComponent,
    state_at_last_visit: int,
    last_visit_age: float,
    censor_age: float,
    outcome: str,
) -> float:
    """log p(censoring record | state at the last visit)."""
    if not 0 <= state_at_last_visit < component.n_states:
        raise ValueError(f"state {state_at_last_visit} out of range")
    vec = censor_loglik_vector(component, last_visit_age, censor_age, outcome)
    return float(vec[state_at_last_visit])


def sample_visit(
    em: EmissionModel, state: int, rng: np.random.Generator
) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Draw (counts, grade histograms) for one visit in the given state."""
    if not 0 <= state < em.n_states:
        raise ValueError(f"state {state} out of range for {em.n_states} states")
    counts = rng.poisson(em.rates[state])
    results = []
    for k in range(em.n_tests):
        if counts[k] > 0:
            results.append(rng.multinomial(counts[k], em.grade_probs[k][state]))
        else:
            results.append(np.zeros(em.grade_probs[k].shape[1], dtype=np.int64))
    return counts.astype(np.int64), tuple(results)
