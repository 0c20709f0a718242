"""Risk prediction, classification metrics, and Kaplan-Meier validation.

Prediction of the last visit's status propagates the filtered state
distribution at the second-to-last visit to the last visit's age, mixes
over frailty classes with their posterior weights, and evaluates the
Multinomial probability of at least one high-grade result given the
observed test counts.  Model validation compares empirical Kaplan-Meier
curves of time to first high-grade result against curves simulated from
the model, summarized by the pointwise median and a 95% band.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .inference import ClassPosterior, _forward_alphas, prepare_many
from .kernels import interval_transition
from .model import ALIVE, HierarchicalModel, ScreeningSequence, _readonly
from .simulate import SimulationSpec, simulate_cohort

#: Posterior-probability cut points of the four standard risk bands.
DEFAULT_RISK_THRESHOLDS = (0.0, 0.125, 0.25, 0.75, 1.0)
DEFAULT_RISK_LABELS = ("low", "unknown", "medium", "high")


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """Predicted status of the last visit for one individual."""

    p_star: float
    hard_label: int
    class_posterior: ClassPosterior
    predicted_grade_distribution: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not 0.0 <= self.p_star <= 1.0 + 1e-12:
            raise ValueError(f"p_star must be a probability, got {self.p_star}")
        object.__setattr__(
            self,
            "predicted_grade_distribution",
            tuple(_readonly(g) for g in self.predicted_grade_distribution),
        )


@dataclass(frozen=True, eq=False)
class KaplanMeierCurve:
    """Product-limit survival estimate at the observed event times."""

    event_times: np.ndarray
    at_risk: np.ndarray
    failures: np.ndarray
    survival: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "event_times", _readonly(self.event_times))
        object.__setattr__(self, "at_risk", _readonly(self.at_risk))
        object.__setattr__(self, "failures", _readonly(self.failures))
        object.__setattr__(self, "survival", _readonly(self.survival))

    def survival_at(self, times) -> np.ndarray:
        """Step-function evaluation: product over event times <= t."""
        idx = np.searchsorted(self.event_times, np.asarray(times, dtype=float), side="right")
        padded = np.concatenate([[1.0], self.survival])
        return padded[idx]


def _history_as_alive(history: ScreeningSequence):
    """History conditioned on being alive at its own final visit.

    The zero-length censoring gap keeps the original censoring record (and
    anything after the predicted visit) out of the prediction.
    """
    return ScreeningSequence(
        visits=history.visits,
        censor_age=history.visits[-1].age,
        censor_outcome=ALIVE,
        sequence_id=history.sequence_id,
    )


def _default_high_risk_tests(n_tests: int) -> tuple[int, ...]:
    # cytology and histology by convention; HPV (test 2) opts in explicitly
    return tuple(range(min(2, n_tests)))


def predictive_state_distributions(
    history: ScreeningSequence, last_age: float, model: HierarchicalModel
) -> tuple[ClassPosterior, list[np.ndarray]]:
    """Class posterior and per-class state distribution at the last age.

    The per-class distribution is the filtered state at the final history
    visit propagated through the interval transition to ``last_age``;
    treated final visits propagate from the normal state.
    """
    if history.n_visits == 0:
        raise ValueError("history must contain at least one visit")
    if last_age <= history.visits[-1].age:
        raise ValueError("last_age must exceed the final history visit age")
    conditioned = _history_as_alive(history)
    logliks = np.empty(model.n_classes)
    dists = []
    for z, comp in enumerate(model.classes):
        kernels = prepare_many(comp, [conditioned])[0]
        filtered, logliks[z] = _forward_alphas(kernels)
        log_state = filtered[-1] + kernels.censor
        norm = logsumexp(log_state)
        if norm == -np.inf:
            dists.append(np.zeros(comp.n_states))
            continue
        state_dist = np.exp(log_state - norm)
        if history.visits[-1].treated:
            state_dist = np.zeros(comp.n_states)
            state_dist[comp.normal_state] = 1.0
        p = interval_transition(
            comp.intensity, history.visits[-1].age, last_age
        ).entries
        dists.append(np.clip(state_dist @ p, 0.0, None))
    with np.errstate(divide="ignore"):
        scores = np.log(model.class_prior) + logliks
    norm = logsumexp(scores)
    if norm == -np.inf:
        raise ValueError(
            f"history {history.sequence_id!r} has zero likelihood under every class"
        )
    cp = ClassPosterior(probs=np.exp(scores - norm), per_class_loglik=logliks)
    return cp, dists


def predict_last_visit(
    history: ScreeningSequence,
    last_age: float,
    last_counts,
    model: HierarchicalModel,
    grade_threshold: int = 1,
    high_risk_tests: Optional[Sequence[int]] = None,
) -> PredictionResult:
    """Probability that the last visit shows any high-grade result.

    ``last_counts`` are the observed test counts at the predicted visit;
    grade outcomes are Multinomial given those counts.  A result is
    high-grade when its level index is >= ``grade_threshold``; only test
    types in ``high_risk_tests`` (cytology/histology by default) count
    toward the high-risk event.
    """
    cp, dists = predictive_state_distributions(history, last_age, model)
    last_counts = np.asarray(last_counts, dtype=np.int64)
    em0 = model.classes[0].emission
    if last_counts.shape != (em0.n_tests,):
        raise ValueError(f"last_counts must have one entry per test type ({em0.n_tests})")
    if high_risk_tests is None:
        high_risk_tests = _default_high_risk_tests(em0.n_tests)

    p_star = 0.0
    grade_dists = [np.zeros(l) for l in em0.levels]
    for z, comp in enumerate(model.classes):
        em = comp.emission
        low_mass = np.ones(comp.n_states)
        for k in high_risk_tests:
            low = em.grade_probs[k][:, :grade_threshold].sum(axis=1)
            low_mass = low_mass * low ** last_counts[k]
        p_star += cp.probs[z] * float(dists[z] @ (1.0 - low_mass))
        for k in range(em.n_tests):
            grade_dists[k] += cp.probs[z] * (dists[z] @ em.grade_probs[k])
    p_star = min(max(p_star, 0.0), 1.0)
    return PredictionResult(
        p_star=p_star,
        hard_label=int(p_star >= 0.5),
        class_posterior=cp,
        predicted_grade_distribution=tuple(grade_dists),
    )


def split_last_visit(seq: ScreeningSequence) -> tuple[ScreeningSequence, float, np.ndarray, int]:
    """History without the final visit plus that visit's age, counts, truth.

    The truth label is 1 when the final visit carries any high-grade
    result on the default high-risk test types.
    """
    if seq.n_visits < 2:
        raise ValueError("need at least two visits to split off the last one")
    last = seq.visits[-1]
    history = ScreeningSequence(
        visits=seq.visits[:-1],
        censor_age=last.age,
        censor_outcome=ALIVE,
        sequence_id=seq.sequence_id,
    )
    label = visit_high_risk(last)
    return history, last.age, np.asarray(last.counts), label


def visit_high_risk(
    visit, grade_threshold: int = 1, high_risk_tests: Optional[Sequence[int]] = None
) -> int:
    """1 when the visit has at least one result of level >= the threshold."""
    if high_risk_tests is None:
        high_risk_tests = _default_high_risk_tests(visit.n_tests)
    for k in high_risk_tests:
        if visit.results[k][grade_threshold:].sum() > 0:
            return 1
    return 0


# ---------------------------------------------------------------------------
# Classification metrics


def classification_metrics(scores, truths) -> dict:
    """ACC / AUC / F1 / AP / precision / recall of probability scores.

    AUC uses the rank (Mann-Whitney) statistic with midrank ties; AP is
    the precision-weighted sum of recall increments over descending
    scores.  A single-class truth set has no ranking information: AUC is
    reported as 0.5 with ``degenerate_auc`` set.
    """
    scores = np.asarray(scores, dtype=float)
    truths = np.asarray(truths, dtype=int)
    if scores.shape != truths.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores and truths must be equal-length nonempty vectors")
    n_pos = int(truths.sum())
    n_neg = truths.size - n_pos
    preds = (scores >= 0.5).astype(int)
    tp = int(np.sum((preds == 1) & (truths == 1)))
    fp = int(np.sum((preds == 1) & (truths == 0)))
    fn = int(np.sum((preds == 0) & (truths == 1)))
    acc = float(np.mean(preds == truths))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall
        else 0.0
    )
    degenerate = n_pos == 0 or n_neg == 0
    if degenerate:
        auc = 0.5
        ap = float(n_pos > 0)
    else:
        from scipy.stats import rankdata

        ranks = rankdata(scores)  # midranks
        auc = float(
            (ranks[truths == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
        )
        ap = _average_precision(scores, truths)
    return {
        "ACC": acc,
        "AUC": auc,
        "F1": f1,
        "AP": ap,
        "P": precision,
        "R": recall,
        "degenerate_auc": degenerate,
    }


def _average_precision(scores: np.ndarray, truths: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truths[order]
    tp_cum = np.cumsum(t)
    k = np.arange(1, t.size + 1)
    # evaluate at the last index of each tied-score group
    last_of_group = np.nonzero(np.diff(s, append=-np.inf) != 0)[0]
    tp = tp_cum[last_of_group].astype(float)
    prec = tp / k[last_of_group]
    rec = tp / truths.sum()
    rec_prev = np.concatenate([[0.0], rec[:-1]])
    return float(np.sum((rec - rec_prev) * prec))


# ---------------------------------------------------------------------------
# Kaplan-Meier validation


def extract_failure_time(
    seq: ScreeningSequence,
    grade_threshold: int = 1,
    high_risk_tests: Optional[Sequence[int]] = None,
) -> Optional[tuple[float, bool]]:
    """Censored time from first low-grade observation to first high-grade.

    The origin is the first visit carrying any result; sequences whose
    first informative visit is already high-grade (or that never produce a
    result) are excluded and yield None.  Without a subsequent high-grade
    result the time to ``censor_age`` is returned as censored.
    """
    if high_risk_tests is None and seq.n_visits:
        high_risk_tests = _default_high_risk_tests(seq.visits[0].n_tests)
    origin = None
    for v in seq.visits:
        informative = any(v.results[k].sum() > 0 for k in range(v.n_tests))
        high = visit_high_risk(v, grade_threshold, high_risk_tests)
        if origin is None:
            if not informative:
                continue
            if high:
                return None
            origin = v.age
        elif high:
            return v.age - origin, True
    if origin is None:
        return None
    return seq.censor_age - origin, False


def kaplan_meier(records: Sequence[tuple[float, bool]]) -> KaplanMeierCurve:
    """Product-limit estimator from (time, event) records.

    Individuals censored exactly at an event time remain in the risk set
    for that time.
    """
    if not records:
        raise ValueError("kaplan_meier needs at least one record")
    times = np.array([r[0] for r in records], dtype=float)
    events = np.array([r[1] for r in records], dtype=bool)
    if np.any(times < 0):
        raise ValueError("event times must be nonnegative")
    event_times = np.unique(times[events])
    at_risk = np.array([(times >= t).sum() for t in event_times], dtype=np.int64)
    failures = np.array(
        [((times == t) & events).sum() for t in event_times], dtype=np.int64
    )
    with np.errstate(invalid="ignore"):
        survival = np.cumprod(1.0 - failures / at_risk)
    return KaplanMeierCurve(
        event_times=event_times,
        at_risk=at_risk,
        failures=failures,
        survival=survival,
    )


def cohort_failure_records(sequences, grade_threshold=1, high_risk_tests=None):
    out = []
    for seq in sequences:
        rec = extract_failure_time(seq, grade_threshold, high_risk_tests)
        if rec is not None:
            out.append(rec)
    return out


def km_band(
    model: HierarchicalModel,
    spec: SimulationSpec,
    replications: int,
    seed: int,
    grid: Optional[np.ndarray] = None,
    grade_threshold: int = 1,
    high_risk_tests: Optional[Sequence[int]] = None,
) -> dict:
    """Median and 95% band of simulated Kaplan-Meier curves on a time grid.

    Each replication simulates one cohort from the model and computes its
    KM curve; the band is the pointwise 2.5/97.5 percentile (taken with
    the lower/higher order statistic, so two replications give min/max).
    Replications without any failure record contribute a constant-1 curve.
    """
    if replications < 2:
        raise ValueError("need at least 2 replications")
    if grid is None:
        grid = np.arange(0.0, 15.0 + 1e-9, 0.25)
    grid = np.asarray(grid, dtype=float)
    curves = np.ones((replications, grid.size))
    rep_seeds = np.random.SeedSequence(seed).generate_state(replications)
    for r in range(replications):
        sequences, _ = simulate_cohort(model, spec, seed=int(rep_seeds[r]))
        records = cohort_failure_records(sequences, grade_threshold, high_risk_tests)
        if records:
            curves[r] = kaplan_meier(records).survival_at(grid)
    return {
        "grid": grid,
        "median": np.percentile(curves, 50.0, axis=0),
        "lower": np.percentile(curves, 2.5, axis=0, method="lower"),
        "upper": np.percentile(curves, 97.5, axis=0, method="higher"),
        "curves": curves,
    }


# ---------------------------------------------------------------------------
# Posterior predictive validation and risk stratification


def avg_posterior_predictive(
    sequences: Sequence[ScreeningSequence],
    model: HierarchicalModel,
    include_empty: bool = True,
) -> np.ndarray:
    """Mean posterior predictive probability of the last visit per test type.

    For each sequence the probability of the observed last-visit grade
    histogram given the history and the observed counts, mixed over states
    and classes.  Visits with zero tests of a type contribute probability
    1 for that type; ``include_empty=False`` drops them from that type's
    average instead.
    """
    em0 = model.classes[0].emission
    k_n = em0.n_tests
    total = np.zeros(k_n)
    denom = np.zeros(k_n)
    for seq in sequences:
        if seq.n_visits < 2:
            raise ValueError("each sequence needs at least 2 visits")
        last = seq.visits[-1]
        history = ScreeningSequence(
            visits=seq.visits[:-1],
            censor_age=last.age,
            censor_outcome=ALIVE,
            sequence_id=seq.sequence_id,
        )
        cp, dists = predictive_state_distributions(history, last.age, model)
        for k in range(k_n):
            e = int(last.counts[k])
            if e == 0:
                if include_empty:
                    total[k] += 1.0
                    denom[k] += 1.0
                continue
            g = last.results[k].astype(float)
            log_coeff = float(gammaln(e + 1.0) - gammaln(g + 1.0).sum())
            prob = 0.0
            for z, comp in enumerate(model.classes):
                with np.errstate(divide="ignore", invalid="ignore"):
                    logpmf = log_coeff + xlogy(
                        g[None, :], comp.emission.grade_probs[k]
                    ).sum(axis=1)
                prob += cp.probs[z] * float(dists[z] @ np.exp(logpmf))
            total[k] += prob
            denom[k] += 1.0
    return total / np.maximum(denom, 1.0)


def risk_stratify(
    posterior_probs,
    thresholds: Sequence[float] = DEFAULT_RISK_THRESHOLDS,
    labels: Sequence[str] = DEFAULT_RISK_LABELS,
) -> list[str]:
    """Band each posterior frailty probability by the threshold grid.

    Bands are (t_i, t_{i+1}] with the first band closed at 0, so boundary
    values fall in the lower band and 1.0 is always the top band.
    """
    thresholds = [float(t) for t in thresholds]
    if len(thresholds) < 2 or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    if thresholds[0] != 0.0 or thresholds[-1] != 1.0:
        raise ValueError("thresholds must start at 0 and end at 1")
    if len(labels) != len(thresholds) - 1:
        raise ValueError("need exactly one label per band")
    probs = np.asarray(posterior_probs, dtype=float)
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("posterior probabilities must lie in [0, 1]")
    idx = np.searchsorted(thresholds[1:-1], probs, side="left")
    return [labels[i] for i in idx]
