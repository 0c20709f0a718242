"""Exact per-sequence inference for a fixed parameter set.

All recursions run in log space over visit indices; between visits the
latent state evolves by the interval transition matrix of the sequence's
age gap.  A treated visit replaces the outgoing transition row with the
normal state's row (deterministic reset after the emission), and the
censoring record enters as a terminal per-state term.  The marginal
likelihood p(O | z) comes straight out of the forward recursion, which is
exact; sampling-based routes are used only where an actual path draw is
needed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .emissions import censor_loglik_vector, sequence_loglik_table
from .kernels import interval_transitions_batch
from .model import ClassComponent, HierarchicalModel, ScreeningSequence, _readonly

logger = logging.getLogger(__name__)


def logsumexp(a, axis=None, keepdims=False):
    """Plain-numpy log-sum-exp; -inf blocks stay -inf without warnings.

    scipy's implementation carries array-API dispatch overhead that
    dominates the per-visit recursions here, so the hot loops use this.
    """
    a = np.asarray(a, dtype=float)
    hi = np.max(a, axis=axis, keepdims=True) if a.size else np.float64(-np.inf)
    safe = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(invalid="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + hi
    out = np.where(np.isfinite(hi), out, hi)
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    if out.ndim == 0:
        return float(out)
    return out


class InferenceError(ValueError):
    """Raised when inference is impossible (zero likelihood everywhere)."""


@dataclass(frozen=True, eq=False)
class ClassPosterior:
    """Posterior over frailty classes for one sequence."""

    probs: np.ndarray             # (Z,)
    per_class_loglik: np.ndarray  # (Z,) log p(O | z)

    def __post_init__(self):
        object.__setattr__(self, "probs", _readonly(self.probs))
        object.__setattr__(self, "per_class_loglik", _readonly(self.per_class_loglik))


@dataclass(frozen=True, eq=False)
class StatePosterior:
    """Visit-level state inference for one sequence under one class.

    ``filtered[t]`` is log p(S_t | O_{1:t}) (row-normalized, censoring not
    yet applied); ``log_marginal`` is log p(O | z) including the censoring
    term.  ``smoothed`` and ``viterbi_path`` are filled by the operations
    that compute them and None otherwise.
    """

    filtered: np.ndarray
    log_marginal: float
    smoothed: Optional[np.ndarray] = None
    viterbi_path: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class SequenceKernels:
    """Precomputed per-sequence tables shared by all recursions."""

    log_init: np.ndarray                 # (M,)
    emis: np.ndarray                     # (T, M)
    log_trans: tuple[np.ndarray, ...]    # T-1 matrices (M, M), treatment applied
    censor: np.ndarray                   # (M,) terminal term vs state at last visit


def prepare_many(
    component: ClassComponent, sequences: Sequence[ScreeningSequence]
) -> list[SequenceKernels]:
    """Build :class:`SequenceKernels` for many sequences at once.

    All interval transition matrices (visit gaps plus censor gaps) are
    exponentiated in a single batched call.
    """
    spans = []
    owners = []
    for n, seq in enumerate(sequences):
        if seq.n_visits == 0:
            raise InferenceError("cannot run inference on a sequence with no visits")
        ages = seq.ages
        for a, b in zip(ages[:-1], ages[1:]):
            spans.append((a, b))
        spans.append((ages[-1], seq.censor_age))
        owners.append(seq.n_visits)
    mats = interval_transitions_batch(component.intensity, spans)

    death = component.death_state
    normal = component.normal_state
    m = component.n_states
    out = []
    pos = 0
    for seq, t_n in zip(sequences, owners):
        seg0 = component.partition.segment_index(seq.visits[0].age)
        with np.errstate(divide="ignore"):
            log_init = np.log(np.clip(component.initial[seg0], 0.0, None))
        emis = sequence_loglik_table(component.emission, seq)
        log_trans = []
        for t in range(t_n - 1):
            with np.errstate(divide="ignore"):
                lt = np.log(np.clip(mats[pos + t], 0.0, None))
            if seq.visits[t].treated:
                lt = np.broadcast_to(lt[normal].copy(), (m, m))
            log_trans.append(lt)
        censor_mat = mats[pos + t_n - 1]
        if death is None:
            censor = (
                np.zeros(m)
                if seq.censor_outcome == "alive"
                else np.full(m, -np.inf)
            )
        else:
            p_death = np.clip(censor_mat[:, death], 0.0, 1.0)
            with np.errstate(divide="ignore"):
                censor = (
                    np.log(p_death)
                    if seq.censor_outcome == "death"
                    else np.log1p(-p_death)
                )
        if seq.visits[-1].treated:
            censor = np.full(m, censor[normal])
        pos += t_n
        out.append(
            SequenceKernels(
                log_init=log_init,
                emis=emis,
                log_trans=tuple(log_trans),
                censor=censor,
            )
        )
    return out


def _prepare(component: ClassComponent, seq: ScreeningSequence) -> SequenceKernels:
    return prepare_many(component, [seq])[0]


def _forward_alphas(k: SequenceKernels) -> tuple[np.ndarray, float]:
    """Normalized log filtered table and the full log marginal."""
    t_n, m = k.emis.shape
    filtered = np.empty((t_n, m))
    alpha = k.log_init + k.emis[0]
    log_norm = logsumexp(alpha)
    if log_norm == -np.inf:
        logger.warning("observation impossible under the model at visit 0")
        filtered[:] = -np.inf
        return filtered, -np.inf
    filtered[0] = alpha - log_norm
    for t in range(t_n - 1):
        alpha = logsumexp(filtered[t][:, None] + k.log_trans[t], axis=0) + k.emis[t + 1]
        step = logsumexp(alpha)
        if step == -np.inf:
            logger.warning("observation impossible under the model at visit %d", t + 1)
            filtered[t + 1:] = -np.inf
            return filtered, -np.inf
        filtered[t + 1] = alpha - step
        log_norm += step
    tail = logsumexp(filtered[-1] + k.censor)
    return filtered, float(log_norm + tail)


def forward(seq: ScreeningSequence, component: ClassComponent) -> StatePosterior:
    """Filtered state distributions and the exact marginal log-likelihood."""
    filtered, log_marginal = _forward_alphas(_prepare(component, seq))
    return StatePosterior(filtered=filtered, log_marginal=log_marginal)


def _backward_betas(k: SequenceKernels) -> np.ndarray:
    t_n, m = k.emis.shape
    betas = np.empty((t_n, m))
    betas[-1] = k.censor
    for t in range(t_n - 2, -1, -1):
        betas[t] = logsumexp(
            k.log_trans[t] + (k.emis[t + 1] + betas[t + 1])[None, :], axis=1
        )
    return betas


def smoothed_marginals(seq: ScreeningSequence, component: ClassComponent) -> np.ndarray:
    """Posterior state probabilities per visit, shape (T, M); rows sum to 1."""
    k = _prepare(component, seq)
    filtered, log_marginal = _forward_alphas(k)
    if log_marginal == -np.inf:
        raise InferenceError("zero-likelihood sequence has no smoothed marginals")
    betas = _backward_betas(k)
    log_smooth = filtered + betas
    log_smooth -= logsumexp(log_smooth, axis=1, keepdims=True)
    return np.exp(log_smooth)


def viterbi(seq: ScreeningSequence, component: ClassComponent) -> np.ndarray:
    """Most probable state path (ties resolved toward lower state index)."""
    path, _ = viterbi_with_score(seq, component)
    return path


def viterbi_with_score(
    seq: ScreeningSequence, component: ClassComponent
) -> tuple[np.ndarray, float]:
    """Viterbi path plus its joint log-probability (incl. censor term)."""
    k = _prepare(component, seq)
    return _viterbi_from_kernels(k)


def _viterbi_from_kernels(k: SequenceKernels) -> tuple[np.ndarray, float]:
    t_n, m = k.emis.shape
    delta = k.log_init + k.emis[0]
    back = np.zeros((t_n, m), dtype=np.int64)
    for t in range(t_n - 1):
        cand = delta[:, None] + k.log_trans[t]
        back[t + 1] = np.argmax(cand, axis=0)
        delta = cand[back[t + 1], np.arange(m)] + k.emis[t + 1]
    delta = delta + k.censor
    best = float(np.max(delta))
    if best == -np.inf:
        raise InferenceError("no state path has positive probability")
    path = np.empty(t_n, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(t_n - 2, -1, -1):
        path[t] = back[t + 1][path[t + 1]]
    return path, best


def ffbs_sample(
    seq: ScreeningSequence, component: ClassComponent, rng: np.random.Generator
) -> np.ndarray:
    """Draw a state path from the exact joint posterior (backward sampling)."""
    return ffbs_samples(seq, component, rng, 1)[0]


def ffbs_samples(
    seq: ScreeningSequence,
    component: ClassComponent,
    rng: np.random.Generator,
    n_samples: int,
) -> np.ndarray:
    """n independent posterior path draws, shape (n_samples, T).

    The forward pass runs once; only the backward sampling repeats, which
    makes Monte Carlo studies over one sequence cheap.
    """
    k = _prepare(component, seq)
    filtered, log_marginal = _forward_alphas(k)
    if log_marginal == -np.inf:
        raise InferenceError("cannot sample a path for a zero-likelihood sequence")
    t_n, m = k.emis.shape
    last = np.exp(filtered[-1] + k.censor)
    last /= last.sum()
    # conditional tables p(S_t | S_{t+1}): column j holds the distribution of S_t
    conds = []
    for t in range(t_n - 1):
        table = np.exp(filtered[t][:, None] + k.log_trans[t])
        colsum = table.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            table = np.where(colsum > 0, table / colsum, 0.0)
        conds.append(table)
    out = np.empty((n_samples, t_n), dtype=np.int64)
    u = rng.random((n_samples, t_n))
    out[:, -1] = np.searchsorted(np.cumsum(last), u[:, -1], side="right").clip(0, m - 1)
    for t in range(t_n - 2, -1, -1):
        cdf = np.cumsum(conds[t], axis=0)          # (m_prev, m_next)
        picks = cdf[:, out[:, t + 1]].T             # (n_samples, m_prev)
        out[:, t] = (u[:, t][:, None] > picks).sum(axis=1).clip(0, m - 1)
    return out


def _sample_log(logp: np.ndarray, rng: np.random.Generator) -> int:
    p = np.exp(logp - logsumexp(logp))
    p /= p.sum()
    return int(rng.choice(p.shape[0], p=p))


def path_joint_loglik(
    seq: ScreeningSequence, component: ClassComponent, path: np.ndarray
) -> float:
    """Joint log-probability of a fixed visit-state path and the data."""
    k = _prepare(component, seq)
    path = np.asarray(path, dtype=np.int64)
    total = float(k.log_init[path[0]] + k.emis[0, path[0]])
    for t in range(seq.n_visits - 1):
        total += float(k.log_trans[t][path[t], path[t + 1]] + k.emis[t + 1, path[t + 1]])
    return total + float(k.censor[path[-1]])


def class_posterior(seq: ScreeningSequence, model: HierarchicalModel) -> ClassPosterior:
    """Posterior over frailty classes given one sequence's observations."""
    logliks = np.array(
        [forward(seq, comp).log_marginal for comp in model.classes]
    )
    return _combine_class_logliks(model, logliks, seq.sequence_id)


def _combine_class_logliks(
    model: HierarchicalModel, logliks: np.ndarray, sequence_id
) -> ClassPosterior:
    with np.errstate(divide="ignore"):
        scores = np.log(model.class_prior) + logliks
    norm = logsumexp(scores)
    if norm == -np.inf:
        raise InferenceError(
            f"sequence {sequence_id!r} has zero likelihood under every class"
        )
    return ClassPosterior(probs=np.exp(scores - norm), per_class_loglik=logliks)


def analyze_sequence(seq: ScreeningSequence, component: ClassComponent) -> StatePosterior:
    """Full per-sequence diagnostics: filtered, smoothed, Viterbi, marginal."""
    k = _prepare(component, seq)
    filtered, log_marginal = _forward_alphas(k)
    if log_marginal == -np.inf:
        return StatePosterior(filtered=filtered, log_marginal=log_marginal)
    betas = _backward_betas(k)
    log_smooth = filtered + betas
    log_smooth -= logsumexp(log_smooth, axis=1, keepdims=True)
    path, _ = _viterbi_from_kernels(k)
    return StatePosterior(
        filtered=filtered,
        log_marginal=log_marginal,
        smoothed=np.exp(log_smooth),
        viterbi_path=path,
    )


def batch_class_posteriors(
    model: HierarchicalModel,
    sequences: Sequence[ScreeningSequence],
    workers: int = 1,
) -> list[ClassPosterior]:
    """Class posteriors for many sequences; order-stable and parallelizable."""
    logliks = batch_class_logliks(model, sequences, workers=workers)
    return [
        _combine_class_logliks(model, logliks[n], sequences[n].sequence_id)
        for n in range(len(sequences))
    ]


def batch_class_logliks(
    model: HierarchicalModel,
    sequences: Sequence[ScreeningSequence],
    workers: int = 1,
) -> np.ndarray:
    """log p(O_n | z) for every sequence and class, shape (N, Z)."""
    if workers > 1 and len(sequences) > 1:
        from concurrent.futures import ProcessPoolExecutor

        chunks = np.array_split(np.arange(len(sequences)), min(workers, len(sequences)))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(
                    _class_logliks_chunk,
                    [(model, [sequences[i] for i in c]) for c in chunks],
                )
            )
        return np.concatenate(parts, axis=0)
    return _class_logliks_chunk((model, list(sequences)))


def _class_logliks_chunk(args) -> np.ndarray:
    model, seqs = args
    out = np.empty((len(seqs), model.n_classes))
    for z, comp in enumerate(model.classes):
        kernels = prepare_many(comp, seqs)
        for n, k in enumerate(kernels):
            out[n, z] = _forward_alphas(k)[1]
    return out


def diagnostics_rows(seq: ScreeningSequence, component: ClassComponent) -> list[list]:
    """Per-visit diagnostic table: age, smoothed probabilities, Viterbi state."""
    sp = analyze_sequence(seq, component)
    rows = []
    for t, v in enumerate(seq.visits):
        rows.append([v.age, *sp.smoothed[t].tolist(), int(sp.viterbi_path[t])])
    return rows
