"""Hybrid soft/hard EM training with a gradient-based M-step.

The E-step computes exact class posteriors (soft assignment) and per-class
Viterbi state paths (hard assignment).  The M-step maximizes the expected
marginal complete log-likelihood: class posteriors weight, per sequence
and class, the fixed-path joint log-likelihood of the candidate
parameters, plus Dirichlet log-prior regularizers on the trained simplex
parameters.  Maximization runs a two-loop L-BFGS with Armijo backtracking.

Work is organized map-reduce style over clusters of sequences.  Per-cluster
results are returned as per-sequence arrays and reduced in global sequence
order, so objective values, gradients and the likelihood trace are
bit-identical for any cluster layout and worker count.

Emission, initial-distribution and class-prior terms of the objective
depend on the data only through sufficient statistics that are fixed
during an M-step, so they are aggregated once and evaluated in closed
form.  Only the transition terms need per-evaluation matrix exponentials;
those are batched, and their gradients use the adjoint identity
<L(A, E), uv'> = <E, L(A', uv')> so one Frechet derivative per interval
piece yields the gradient for every intensity entry of its segment.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .emissions import sequence_loglik_table
from .inference import (
    InferenceError,
    _forward_alphas,
    _viterbi_from_kernels,
    prepare_many,
)
from .kernels import expm_many, frechet_many
from .model import (
    DEATH,
    ClassComponent,
    EMConfig,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
    TopologySpec,
    validate_model,
)
from .params import ParameterPacker

logger = logging.getLogger(__name__)

_KIND_TRANS = 0
_KIND_CENSOR_DEATH = 1
_KIND_CENSOR_ALIVE = 2
_KIND_SKIP = 3
_KIND_IMPOSSIBLE = 4

_MAX_PIECE_NORM = 1e12


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (invalid model or data)."""


@dataclass(frozen=True)
class ClusterPartition:
    """Disjoint groups of sequence indices covering the training set."""

    clusters: tuple[np.ndarray, ...]

    def __post_init__(self):
        groups = tuple(np.asarray(c, dtype=np.int64) for c in self.clusters)
        flat = np.concatenate(groups) if groups else np.array([], dtype=np.int64)
        n = flat.size
        if n and (np.unique(flat).size != n or flat.min() != 0 or flat.max() != n - 1):
            raise ValueError("clusters must be disjoint and cover 0..N-1")
        object.__setattr__(self, "clusters", groups)

    @classmethod
    def contiguous(cls, n: int, cluster_size: int) -> "ClusterPartition":
        edges = list(range(0, n, cluster_size)) + [n]
        return cls(
            clusters=tuple(
                np.arange(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a
            )
        )

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)


@dataclass
class EStepCache:
    """Soft class posteriors and hard per-class state paths for a dataset."""

    posteriors: np.ndarray         # (N, Z)
    logliks: np.ndarray            # (N, Z) log p(O_n | z)
    viterbi_scores: np.ndarray     # (N, Z) joint score of the decoded path
    paths: list[list[np.ndarray]]  # [n][z] -> (T_n,) states
    total_loglik: float


@dataclass
class MStepDiagnostics:
    objective_trace: list[float]   # accepted objective values, non-decreasing
    gradient_norms: list[float]
    line_search_failures: int


@dataclass
class FitReport:
    model: HierarchicalModel
    loglik_trace: list[float]
    mstep_objectives: list[list[float]]
    gradient_norms: list[list[float]]
    wall_clock: dict
    converged: bool
    final_loglik: float


# ---------------------------------------------------------------------------
# Parallel map helper


class _Executor:
    """Ordered map over tasks, inline or via a process pool."""

    def __init__(self, workers: int = 1):
        self.workers = workers
        self._pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    def map(self, fn, payloads):
        if self._pool is None or len(payloads) <= 1:
            return [fn(p) for p in payloads]
        return list(self._pool.map(fn, payloads))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# ---------------------------------------------------------------------------
# E-step


def _estep_chunk(args):
    model, seqs = args
    z_count = model.n_classes
    logliks = np.empty((len(seqs), z_count))
    scores = np.empty((len(seqs), z_count))
    paths = [[None] * z_count for _ in seqs]
    for z, comp in enumerate(model.classes):
        kernels = prepare_many(comp, seqs)
        for n, k in enumerate(kernels):
            logliks[n, z] = _forward_alphas(k)[1]
            if logliks[n, z] == -np.inf:
                scores[n, z] = -np.inf
                paths[n][z] = np.zeros(len(seqs[n].visits), dtype=np.int64)
            else:
                paths[n][z], scores[n, z] = _viterbi_from_kernels(k)
    return logliks, scores, paths


def e_step(
    model: HierarchicalModel,
    sequences: Sequence[ScreeningSequence],
    clusters: ClusterPartition,
    executor: Optional[_Executor] = None,
) -> EStepCache:
    """Class posteriors, per-class Viterbi paths and the marginal loglik."""
    executor = executor or _Executor(1)
    payloads = [
        (model, [sequences[i] for i in idx]) for idx in clusters.clusters
    ]
    parts = executor.map(_estep_chunk, payloads)
    logliks = np.concatenate([p[0] for p in parts], axis=0)
    scores = np.concatenate([p[1] for p in parts], axis=0)
    paths = [row for p in parts for row in p[2]]

    with np.errstate(divide="ignore"):
        joint = np.log(model.class_prior)[None, :] + logliks
    per_seq = logsumexp(joint, axis=1)
    bad = np.nonzero(per_seq == -np.inf)[0]
    if bad.size:
        sid = sequences[bad[0]].sequence_id
        raise TrainingError(
            f"sequence {sid if sid is not None else int(bad[0])!r} has zero "
            "likelihood under every class"
        )
    posteriors = np.exp(joint - per_seq[:, None])
    return EStepCache(
        posteriors=posteriors,
        logliks=logliks,
        viterbi_scores=scores,
        paths=paths,
        total_loglik=float(np.sum(per_seq)),
    )


# ---------------------------------------------------------------------------
# Static per-sequence data and transition geometry


@dataclass
class _SequenceData:
    """Arrays derived from one sequence that never change during a fit."""

    n_visits: int
    counts: np.ndarray            # (T, K) float
    results: list[np.ndarray]     # per test type: (T, L_k) float
    loglik_const: float           # state-independent emission log factor
    first_segment: int
    treated: np.ndarray           # (T,) bool
    outcome_death: bool

    @classmethod
    def build(cls, seq: ScreeningSequence, partition) -> "_SequenceData":
        t_n = seq.n_visits
        k_n = seq.visits[0].n_tests if t_n else 0
        counts = np.zeros((t_n, k_n))
        results = [
            np.zeros((t_n, seq.visits[0].results[k].shape[0])) for k in range(k_n)
        ]
        const = 0.0
        for t, v in enumerate(seq.visits):
            counts[t] = v.counts
            const -= float(gammaln(v.counts + 1.0).sum())
            for k in range(k_n):
                results[k][t] = v.results[k]
                if v.counts[k] > 0:
                    const += float(
                        gammaln(v.counts[k] + 1.0) - gammaln(v.results[k] + 1.0).sum()
                    )
        return cls(
            n_visits=t_n,
            counts=counts,
            results=results,
            loglik_const=const,
            first_segment=partition.segment_index(seq.visits[0].age),
            treated=seq.treated_flags,
            outcome_death=seq.censor_outcome == DEATH,
        )


@dataclass
class _ClusterGeometry:
    """Interval/piece decomposition of a cluster's age gaps (path-free).

    Intervals are enumerated sequence by sequence: the T-1 visit gaps in
    order, then the censoring gap.  Pieces are the per-segment fragments
    of each interval, in age order.
    """

    n_seqs: int
    itv_seq: np.ndarray          # (NI,) local sequence index
    itv_piece_start: np.ndarray  # (NI,)
    itv_piece_count: np.ndarray  # (NI,)
    itv_is_censor: np.ndarray    # (NI,) bool
    piece_seg: np.ndarray        # (P,) partition segment per piece
    piece_delta: np.ndarray      # (P,) duration per piece
    piece_itv: np.ndarray        # (P,) owning interval

    @classmethod
    def build(cls, sequences, partition) -> "_ClusterGeometry":
        itv_seq, starts, counts, is_censor = [], [], [], []
        seg, delta, owner = [], [], []
        for n, seq in enumerate(sequences):
            ages = [v.age for v in seq.visits]
            spans = list(zip(ages[:-1], ages[1:])) + [(ages[-1], seq.censor_age)]
            for j, (a, b) in enumerate(spans):
                pieces = partition.pieces(a, b)
                itv_seq.append(n)
                starts.append(len(seg))
                counts.append(len(pieces))
                is_censor.append(j == len(spans) - 1)
                for k, dt in pieces:
                    seg.append(k)
                    delta.append(dt)
                    owner.append(len(itv_seq) - 1)
        return cls(
            n_seqs=len(sequences),
            itv_seq=np.array(itv_seq, dtype=np.int64),
            itv_piece_start=np.array(starts, dtype=np.int64),
            itv_piece_count=np.array(counts, dtype=np.int64),
            itv_is_censor=np.array(is_censor, dtype=bool),
            piece_seg=np.array(seg, dtype=np.int64),
            piece_delta=np.array(delta, dtype=float),
            piece_itv=np.array(owner, dtype=np.int64),
        )


@dataclass
class _ClassWork:
    """Per-class path-dependent interval data for one cluster."""

    from_state: np.ndarray   # (NI,)
    to_state: np.ndarray     # (NI,) target state or death column
    kind: np.ndarray         # (NI,) transition / censor-death / censor-alive / skip
    weight: np.ndarray       # (NI,) class-posterior weight of the owning sequence


def _build_class_work(
    geom: _ClusterGeometry,
    data: Sequence[_SequenceData],
    comp: ClassComponent,
    paths: Sequence[np.ndarray],
    weights: np.ndarray,
) -> _ClassWork:
    ni = geom.itv_seq.size
    from_state = np.zeros(ni, dtype=np.int64)
    to_state = np.zeros(ni, dtype=np.int64)
    kind = np.full(ni, _KIND_SKIP, dtype=np.int64)
    weight = np.zeros(ni)
    death = comp.death_state
    normal = comp.normal_state
    r = 0
    for n, d in enumerate(data):
        path = paths[n]
        w = float(weights[n])
        for t in range(d.n_visits - 1):
            from_state[r] = normal if d.treated[t] else path[t]
            to_state[r] = path[t + 1]
            kind[r] = _KIND_TRANS
            weight[r] = w
            r += 1
        from_state[r] = normal if d.treated[-1] else path[-1]
        if death is None:
            # alive is certain without mortality; death is impossible
            kind[r] = _KIND_IMPOSSIBLE if d.outcome_death else _KIND_SKIP
            to_state[r] = 0
            weight[r] = w if d.outcome_death else 0.0
        else:
            kind[r] = _KIND_CENSOR_DEATH if d.outcome_death else _KIND_CENSOR_ALIVE
            to_state[r] = death
            weight[r] = w
        r += 1
    return _ClassWork(from_state=from_state, to_state=to_state, kind=kind, weight=weight)


# ---------------------------------------------------------------------------
# Transition objective / gradient for one cluster


def _interval_products(geom: _ClusterGeometry, piece_mats: np.ndarray, m: int):
    """Per-piece exponentials and the ordered per-interval products."""
    pp = expm_many(piece_mats) if piece_mats.shape[0] else piece_mats
    ni = geom.itv_seq.size
    out = np.empty((ni, m, m))
    cnt = geom.itv_piece_count
    start = geom.itv_piece_start
    zero = cnt == 0
    if np.any(zero):
        out[zero] = np.eye(m)
    one = cnt == 1
    if np.any(one):
        out[one] = pp[start[one]]
    two = cnt == 2
    if np.any(two):
        out[two] = pp[start[two]] @ pp[start[two] + 1]
    for r in np.nonzero(cnt > 2)[0]:
        acc = pp[start[r]]
        for p in range(start[r] + 1, start[r] + cnt[r]):
            acc = acc @ pp[p]
        out[r] = acc
    return pp, out


def _transition_eval_class(
    qsegs: np.ndarray,
    geom: _ClusterGeometry,
    work: _ClassWork,
    need_grad: bool,
    i_idx: np.ndarray,
    j_idx: np.ndarray,
):
    """Weighted path-transition log-likelihood for one class and cluster.

    Returns (per-sequence values, per-piece gradient rows) where gradient
    rows hold d(value)/d(log q) for the owning segment's allowed entries.
    """
    m = qsegs.shape[1]
    piece_mats = qsegs[geom.piece_seg] * geom.piece_delta[:, None, None]
    seq_vals = np.zeros(geom.n_seqs)
    if not np.all(np.isfinite(piece_mats)) or (
        piece_mats.size and np.abs(piece_mats).max() > _MAX_PIECE_NORM
    ):
        seq_vals[:] = -np.inf
        return seq_vals, None
    pp, pint = _interval_products(geom, piece_mats, m)

    rows = np.arange(geom.itv_seq.size)
    p_entry = pint[rows, work.from_state, work.to_state]
    p_entry = np.clip(p_entry, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(
            work.kind == _KIND_CENSOR_ALIVE, np.log1p(-p_entry), np.log(p_entry)
        )
    logp[work.kind == _KIND_SKIP] = 0.0
    logp[work.kind == _KIND_IMPOSSIBLE] = -np.inf
    active = work.weight > 0
    vals = np.where(active, work.weight * logp, 0.0)
    np.add.at(seq_vals, geom.itv_seq, vals)

    if not need_grad:
        return seq_vals, None
    if not np.all(np.isfinite(vals)):
        raise TrainingError("gradient requested at a zero-probability path point")

    # d(value)/d(p_entry) per interval
    with np.errstate(divide="ignore", invalid="ignore"):
        coeff = np.where(
            work.kind == _KIND_CENSOR_ALIVE,
            -work.weight / (1.0 - p_entry),
            work.weight / p_entry,
        )
    coeff = np.where(active & (work.kind <= _KIND_CENSOR_ALIVE), coeff, 0.0)

    # prefix/suffix vectors around every piece
    np_pieces = geom.piece_seg.size
    u = np.zeros((np_pieces, m))
    v = np.zeros((np_pieces, m))
    for r in np.nonzero((geom.itv_piece_count > 0) & (coeff != 0.0))[0]:
        s0 = geom.itv_piece_start[r]
        c = geom.itv_piece_count[r]
        f = work.from_state[r]
        tcol = work.to_state[r]
        row = np.zeros(m)
        row[f] = 1.0
        for p in range(s0, s0 + c):
            u[p] = row
            if p < s0 + c - 1:
                row = row @ pp[p]
        col = np.zeros(m)
        col[tcol] = 1.0
        for p in range(s0 + c - 1, s0 - 1, -1):
            v[p] = col
            if p > s0:
                col = pp[p] @ col
    w_adj = frechet_many(
        np.transpose(piece_mats, (0, 2, 1)), u[:, :, None] * v[:, None, :]
    )
    cd = coeff[geom.piece_itv] * geom.piece_delta
    # per-piece derivative rows in the (segment-local) allowed-entry basis
    piece_rows = cd[:, None] * (w_adj[:, i_idx, j_idx] - w_adj[:, i_idx, i_idx])
    piece_rows *= qsegs[geom.piece_seg][:, i_idx, j_idx]  # chain rule to log q
    return seq_vals, piece_rows


def _mstep_task(args):
    """Transition value/gradient over one cluster (map phase)."""
    qsegs_list, geom, works, index_pairs, offsets, n_int, n_segments, need_grad = args
    seq_vals = np.zeros(geom.n_seqs)
    grads = np.zeros((geom.n_seqs, n_int)) if need_grad else None
    for z, (qsegs, work) in enumerate(zip(qsegs_list, works)):
        i_idx, j_idx = index_pairs[z]
        vals, piece_rows = _transition_eval_class(
            qsegs, geom, work, need_grad, i_idx, j_idx
        )
        seq_vals += vals
        if need_grad:
            if piece_rows is None:
                raise TrainingError("gradient requested at a non-finite point")
            a = i_idx.size
            cols = offsets[z] + geom.piece_seg[:, None] * a + np.arange(a)[None, :]
            rows = geom.itv_seq[geom.piece_itv]
            np.add.at(grads, (rows[:, None], cols), piece_rows)
    return seq_vals, grads


# ---------------------------------------------------------------------------
# Closed-form (sufficient-statistic) part of the objective


@dataclass
class _BatchStats:
    """Weighted sufficient statistics that are fixed during one M-step."""

    emission: list[dict]        # per packer emission layout
    initial: list[np.ndarray]   # per class: (I, M) weighted first-state counts
    class_weight: np.ndarray    # (Z,)


def _aggregate_statistics(
    packer: ParameterPacker,
    data: Sequence[_SequenceData],
    posteriors: np.ndarray,
    paths: Sequence[Sequence[np.ndarray]],
) -> _BatchStats:
    template = packer.template
    z_count = template.n_classes
    emission = []
    owner_of_class = {}
    for b, lay in enumerate(packer.emission_layouts):
        em = template.classes[lay.class_indices[0]].emission
        emission.append(
            {
                "n_s": np.zeros(em.n_states),
                "e_sum": np.zeros((em.n_states, em.n_tests)),
                "g_sum": [np.zeros((em.n_states, l)) for l in em.levels],
                "const": 0.0,
            }
        )
        for z in lay.class_indices:
            owner_of_class[z] = b
    initial = [
        np.zeros((packer.n_segments, comp.n_states)) for comp in template.classes
    ]
    class_weight = np.zeros(z_count)
    for n, d in enumerate(data):
        for z in range(z_count):
            w = float(posteriors[n, z])
            class_weight[z] += w
            if w == 0.0:
                continue
            path = paths[n][z]
            stats = emission[owner_of_class[z]]
            np.add.at(stats["n_s"], path, w)
            np.add.at(stats["e_sum"], path, w * d.counts)
            for k, g in enumerate(stats["g_sum"]):
                np.add.at(g, path, w * d.results[k])
            stats["const"] += w * d.loglik_const
            initial[z][d.first_segment, path[0]] += w
    return _BatchStats(emission=emission, initial=initial, class_weight=class_weight)


def log_prior(model: HierarchicalModel) -> float:
    """Dirichlet log-prior terms over the trainable simplex parameters."""
    total = 0.0
    seen = set()
    for comp in model.classes:
        em = comp.emission
        if id(em) not in seen:
            seen.add(id(em))
            emit = [s for s in range(em.n_states) if s != em.death_state]
            for k in range(em.n_tests):
                a = em.grade_priors[k][emit]
                p = em.grade_probs[k][emit]
                total += float(np.sum(xlogy(a - 1.0, p)))
        free = [s for s in range(comp.n_states) if s != comp.death_state]
        total += float(np.sum(xlogy(comp.initial_priors[:, free] - 1.0,
                                    comp.initial[:, free])))
    return total


def _closed_form(
    model: HierarchicalModel,
    packer: ParameterPacker,
    stats: _BatchStats,
    need_grad: bool,
):
    """Emission + initial + class-prior objective terms and their gradients."""
    val = 0.0
    grad = np.zeros(packer.n_params) if need_grad else None
    for lay, st in zip(packer.emission_layouts, stats.emission):
        em = model.classes[lay.class_indices[0]].emission
        with np.errstate(divide="ignore", invalid="ignore"):
            val += float(np.sum(xlogy(st["e_sum"], em.rates)))
        val += -float(st["n_s"] @ em.rates.sum(axis=1)) + st["const"]
        emit = list(lay.emit_states)
        for k in range(em.n_tests):
            p = em.grade_probs[k]
            with np.errstate(divide="ignore", invalid="ignore"):
                val += float(np.sum(xlogy(st["g_sum"][k], p)))
            a = em.grade_priors[k][emit]
            val += float(np.sum(xlogy(a - 1.0, p[emit])))
        if need_grad:
            g_rate = st["e_sum"][emit] - st["n_s"][emit, None] * em.rates[emit]
            grad[lay.rate_offset:lay.rate_offset + g_rate.size] = g_rate.ravel()
            pos = lay.grade_offset
            for s in emit:
                for k in range(em.n_tests):
                    counts = st["g_sum"][k][s] + em.grade_priors[k][s] - 1.0
                    p = em.grade_probs[k][s]
                    g = counts[:-1] - counts.sum() * p[:-1]
                    grad[pos:pos + g.size] = g
                    pos += g.size
    for z, comp in enumerate(model.classes):
        c = stats.initial[z]
        with np.errstate(divide="ignore", invalid="ignore"):
            val += float(np.sum(xlogy(c, comp.initial)))
        free = list(packer.initial_free_states[z])
        alpha = comp.initial_priors[:, free]
        val += float(np.sum(xlogy(alpha - 1.0, comp.initial[:, free])))
        if need_grad:
            width = len(free) - 1
            for k in range(packer.n_segments):
                counts = c[k, free] + alpha[k] - 1.0
                p = comp.initial[k, free]
                base = packer.initial_offsets[z] + k * width
                grad[base:base + width] = counts[:-1] - counts.sum() * p[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        val += float(np.sum(xlogy(stats.class_weight, model.class_prior)))
    if need_grad and packer.optimize_class_prior:
        w = stats.class_weight
        grad[packer.prior_offset:] = w[:-1] - w.sum() * model.class_prior[:-1]
    return val, grad


# ---------------------------------------------------------------------------
# The M-step problem


class _MStepProblem:
    """EMCLL and its gradient as functions of the packed parameter vector."""

    def __init__(
        self,
        packer: ParameterPacker,
        data: Sequence[_SequenceData],
        geometries: Sequence[_ClusterGeometry],
        cluster_indices: Sequence[np.ndarray],
        posteriors: np.ndarray,
        paths: Sequence[Sequence[np.ndarray]],
        executor: Optional[_Executor] = None,
    ):
        self.packer = packer
        self.executor = executor or _Executor(1)
        self.geometries = list(geometries)
        self.cluster_indices = list(cluster_indices)
        self.stats = _aggregate_statistics(packer, data, posteriors, paths)
        self.index_pairs = packer.intensity_indices
        self.offsets = packer.intensity_offsets
        self.n_int = packer.n_intensity_params
        template = packer.template
        self.works = []
        for geom, idx in zip(self.geometries, self.cluster_indices):
            works_z = []
            for z, comp in enumerate(template.classes):
                works_z.append(
                    _build_class_work(
                        geom,
                        [data[i] for i in idx],
                        comp,
                        [paths[i][z] for i in idx],
                        posteriors[idx, z],
                    )
                )
            self.works.append(works_z)
        self.n_sequences = sum(g.n_seqs for g in self.geometries)

    def _transition_parts(self, model: HierarchicalModel, need_grad: bool):
        qsegs_list = [np.stack(c.intensity.segments) for c in model.classes]
        payloads = [
            (
                qsegs_list,
                geom,
                works_z,
                self.index_pairs,
                self.offsets,
                self.n_int,
                self.packer.n_segments,
                need_grad,
            )
            for geom, works_z in zip(self.geometries, self.works)
        ]
        parts = self.executor.map(_mstep_task, payloads)
        seq_vals = np.concatenate([p[0] for p in parts])
        value = float(np.sum(seq_vals))
        if not need_grad:
            return value, None
        grads = np.concatenate([p[1] for p in parts], axis=0)
        return value, np.sum(grads, axis=0)

    def value_from_model(self, model: HierarchicalModel) -> float:
        tval, _ = self._transition_parts(model, need_grad=False)
        cval, _ = _closed_form(model, self.packer, self.stats, need_grad=False)
        return tval + cval

    def value_and_grad_from_model(self, model: HierarchicalModel):
        tval, tgrad = self._transition_parts(model, need_grad=True)
        cval, cgrad = _closed_form(model, self.packer, self.stats, need_grad=True)
        grad = cgrad
        grad[: self.n_int] += tgrad[: self.n_int]
        return tval + cval, grad

    def value(self, vec: np.ndarray) -> float:
        return self.value_from_model(self.packer.unpack(vec))

    def value_and_grad(self, vec: np.ndarray):
        return self.value_and_grad_from_model(self.packer.unpack(vec))


def _make_problem(
    model: HierarchicalModel,
    batch,
    optimize_class_prior: bool = False,
    executor: Optional[_Executor] = None,
) -> _MStepProblem:
    """Problem over an explicit batch of (sequence, posterior, paths) triples."""
    sequences = [b[0] for b in batch]
    if sequences:
        posteriors = np.stack([np.asarray(b[1].probs, dtype=float) for b in batch])
    else:
        posteriors = np.zeros((0, model.n_classes))
    paths = [[np.asarray(p, dtype=np.int64) for p in b[2]] for b in batch]
    packer = ParameterPacker(model, optimize_class_prior)
    data = [_SequenceData.build(s, model.partition) for s in sequences]
    geom = _ClusterGeometry.build(sequences, model.partition)
    return _MStepProblem(
        packer=packer,
        data=data,
        geometries=[geom],
        cluster_indices=[np.arange(len(sequences))],
        posteriors=posteriors,
        paths=paths,
        executor=executor,
    )


def emcll(model: HierarchicalModel, batch) -> float:
    """Expected marginal complete log-likelihood of a candidate model.

    ``batch`` is an iterable of (sequence, ClassPosterior, per-class paths)
    computed under the previous iterate; the posteriors and paths stay
    fixed while ``model`` varies.  Includes the Dirichlet log-prior terms.
    """
    return _make_problem(model, list(batch)).value_from_model(model)


def emcll_gradient(
    model: HierarchicalModel, batch, optimize_class_prior: bool = False
) -> np.ndarray:
    """Exact gradient of :func:`emcll` over the packed parameter vector."""
    problem = _make_problem(model, list(batch), optimize_class_prior)
    return problem.value_and_grad_from_model(model)[1]


# ---------------------------------------------------------------------------
# L-BFGS (two-loop recursion, Armijo backtracking)


@dataclass
class _LBFGSResult:
    x: np.ndarray
    objective_trace: list[float]
    gradient_norms: list[float]
    line_search_failures: int


def _two_loop(g, svecs, yvecs, rhos):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(svecs), reversed(yvecs), reversed(rhos)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if svecs:
        s, y = svecs[-1], yvecs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(svecs, yvecs, rhos), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_maximize(
    value,
    value_and_grad,
    x0: np.ndarray,
    iterations: int,
    memory: int,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 30,
    gtol: float = 1e-10,
) -> _LBFGSResult:
    """Maximize a smooth objective; accepted values are non-decreasing."""
    x = np.array(x0, dtype=float)
    fmax, g = value_and_grad(x)
    if not np.isfinite(fmax):
        raise TrainingError("objective is not finite at the starting point")
    f = -fmax
    g = -np.asarray(g)
    trace = [fmax]
    gnorms = [float(np.max(np.abs(g))) if g.size else 0.0]
    svecs, yvecs, rhos = [], [], []
    failures = 0
    for _ in range(iterations):
        if g.size == 0 or np.max(np.abs(g)) < gtol:
            break
        d = -_two_loop(g, svecs, yvecs, rhos)
        gd = float(g @ d)
        if not np.isfinite(gd) or gd >= 0:
            d = -g
            gd = -float(g @ g)
        # raw gradient steps (no curvature history yet) get a normalized length
        step = min(1.0, 1.0 / np.abs(g).sum()) if not svecs else 1.0
        accepted = False
        for _ in range(max_backtracks):
            xn = x + step * d
            fn = -value(xn)
            if np.isfinite(fn) and fn <= f + c1 * step * gd:
                accepted = True
                break
            step *= shrink
        if not accepted:
            failures += 1
            logger.warning("line search failed after %d backtracks", max_backtracks)
            break
        fn2, gn = value_and_grad(xn)
        fn2, gn = -fn2, -np.asarray(gn)
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            svecs.append(s)
            yvecs.append(y)
            rhos.append(1.0 / sy)
            if len(svecs) > memory:
                svecs.pop(0)
                yvecs.pop(0)
                rhos.pop(0)
        x, f, g = xn, fn2, gn
        trace.append(-f)
        gnorms.append(float(np.max(np.abs(g))))
    return _LBFGSResult(
        x=x, objective_trace=trace, gradient_norms=gnorms, line_search_failures=failures
    )


# ---------------------------------------------------------------------------
# M-step and the EM driver


def mstep(
    model: HierarchicalModel,
    cache: EStepCache,
    sequences: Sequence[ScreeningSequence],
    clusters: ClusterPartition,
    config: EMConfig,
    executor: Optional[_Executor] = None,
) -> tuple[HierarchicalModel, MStepDiagnostics]:
    """One L-BFGS maximization of the EMCLL at fixed E-step quantities."""
    packer = ParameterPacker(model, config.optimize_class_prior)
    data = [_SequenceData.build(s, model.partition) for s in sequences]
    geometries = [
        _ClusterGeometry.build([sequences[i] for i in idx], model.partition)
        for idx in clusters.clusters
    ]
    problem = _MStepProblem(
        packer=packer,
        data=data,
        geometries=geometries,
        cluster_indices=clusters.clusters,
        posteriors=cache.posteriors,
        paths=cache.paths,
        executor=executor,
    )
    return _run_mstep(problem, model, config)


def _run_mstep(problem: _MStepProblem, model: HierarchicalModel, config: EMConfig):
    x0 = problem.packer.pack(model)
    result = lbfgs_maximize(
        problem.value,
        problem.value_and_grad,
        x0,
        iterations=config.lbfgs_iterations,
        memory=config.lbfgs_memory,
    )
    diagnostics = MStepDiagnostics(
        objective_trace=result.objective_trace,
        gradient_norms=result.gradient_norms,
        line_search_failures=result.line_search_failures,
    )
    return problem.packer.unpack(result.x), diagnostics


def fit(
    model_init: HierarchicalModel,
    sequences: Sequence[ScreeningSequence],
    config: EMConfig,
) -> FitReport:
    """Alternate soft/hard E-steps and L-BFGS M-steps until convergence.

    The trace records the exact marginal log-likelihood of the model
    entering each iteration; convergence is declared when its relative
    change drops below ``config.convergence_tolerance``.
    """
    violations = validate_model(model_init)
    if violations:
        raise TrainingError("invalid initial model: " + "; ".join(violations))
    if not sequences:
        raise TrainingError("no training sequences")
    for n, seq in enumerate(sequences):
        if seq.n_visits == 0:
            sid = seq.sequence_id if seq.sequence_id is not None else n
            raise TrainingError(f"sequence {sid!r} has no visits")
    packer = ParameterPacker(model_init, config.optimize_class_prior)
    clusters = ClusterPartition.contiguous(len(sequences), config.cluster_size)
    executor = _Executor(config.workers)
    wall = {"e_step": 0.0, "m_step": 0.0}
    trace: list[float] = []
    mstep_objectives: list[list[float]] = []
    gradient_norms: list[list[float]] = []
    model = model_init
    converged = False
    try:
        data = [_SequenceData.build(s, model.partition) for s in sequences]
        geometries = [
            _ClusterGeometry.build([sequences[i] for i in idx], model.partition)
            for idx in clusters.clusters
        ]
        for _ in range(config.em_iterations):
            t0 = time.perf_counter()
            cache = e_step(model, sequences, clusters, executor)
            wall["e_step"] += time.perf_counter() - t0
            trace.append(cache.total_loglik)
            if len(trace) > 1:
                rel = abs(trace[-1] - trace[-2]) / max(abs(trace[-2]), 1e-300)
                if rel < config.convergence_tolerance:
                    converged = True
                    break
            t0 = time.perf_counter()
            problem = _MStepProblem(
                packer=packer,
                data=data,
                geometries=geometries,
                cluster_indices=clusters.clusters,
                posteriors=cache.posteriors,
                paths=cache.paths,
                executor=executor,
            )
            model, diag = _run_mstep(problem, model, config)
            wall["m_step"] += time.perf_counter() - t0
            mstep_objectives.append(diag.objective_trace)
            gradient_norms.append(diag.gradient_norms)
        t0 = time.perf_counter()
        final_cache = e_step(model, sequences, clusters, executor)
        wall["e_step"] += time.perf_counter() - t0
        final_loglik = final_cache.total_loglik
    finally:
        executor.close()
    return FitReport(
        model=model,
        loglik_trace=trace,
        mstep_objectives=mstep_objectives,
        gradient_norms=gradient_norms,
        wall_clock=wall,
        converged=converged,
        final_loglik=final_loglik,
    )


# ---------------------------------------------------------------------------
# Initialization and gradient checking


def initialize_model(
    spec: TopologySpec,
    sequences: Sequence[ScreeningSequence],
    rng: np.random.Generator,
    severity_tilt: float = 1.0,
) -> HierarchicalModel:
    """Initial model: random log-uniform intensities, moment-matched rates.

    Grade probabilities start from Dirichlet-smoothed global grade
    frequencies with a mild severity tilt across states (higher states
    lean toward higher grades) so that states are not exactly
    exchangeable at the starting point.  Initial distributions are uniform
    over non-death states.
    """
    k_n = len(spec.test_levels)
    count_sum = np.zeros(k_n)
    grade_sum = [np.zeros(l) for l in spec.test_levels]
    n_visits = 0
    for seq in sequences:
        for v in seq.visits:
            n_visits += 1
            count_sum += v.counts
            for k in range(k_n):
                grade_sum[k] += v.results[k]
    mean_rate = count_sum / max(n_visits, 1)
    mean_rate = np.maximum(mean_rate, 1e-3)

    emissions = []
    for z in range(spec.n_classes):
        m = spec.n_states[z]
        if spec.share_emission and emissions and spec.n_states[z] == spec.n_states[0]:
            emissions.append(emissions[0])
            continue
        rates = np.tile(mean_rate, (m, 1))
        if spec.death_state is not None:
            rates[spec.death_state] = 0.0
        probs = []
        priors = []
        for k, l in enumerate(spec.test_levels):
            base = np.log(grade_sum[k] + spec.grade_prior)
            p = np.empty((m, l))
            for s in range(m):
                sev = s / max(m - 1, 1)
                tilt = severity_tilt * sev * (np.arange(l) / max(l - 1, 1) - 0.5)
                logits = base + tilt
                p[s] = np.exp(logits - logits.max())
                p[s] /= p[s].sum()
            if spec.death_state is not None:
                p[spec.death_state] = 1.0 / l
            probs.append(p)
            priors.append(np.full((m, l), spec.grade_prior))
        emissions.append(
            EmissionModel(
                rates=rates,
                grade_probs=tuple(probs),
                grade_priors=tuple(priors),
                death_state=spec.death_state,
            )
        )

    classes = []
    n_seg = spec.partition.n_segments
    for z in range(spec.n_classes):
        m = spec.n_states[z]
        mask = spec.allowed_mask(z)
        if spec.death_state is not None and np.any(mask[spec.death_state]):
            raise ValueError("death state must have no outgoing transitions")
        segs = []
        for _ in range(n_seg):
            q = np.zeros((m, m))
            q[mask] = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=int(mask.sum())))
            np.fill_diagonal(q, -q.sum(axis=1))
            segs.append(q)
        intensity = PiecewiseIntensity(
            partition=spec.partition, segments=tuple(segs), allowed=mask
        )
        initial = np.full((n_seg, m), 1.0 / m)
        if spec.death_state is not None:
            initial[:, spec.death_state] = 0.0
            initial /= initial.sum(axis=1, keepdims=True)
        classes.append(
            ClassComponent(
                intensity=intensity,
                initial=initial,
                initial_priors=np.full((n_seg, m), spec.initial_prior),
                emission=emissions[z],
                normal_state=spec.normal_state,
            )
        )
    return HierarchicalModel(
        class_prior=np.asarray(spec.class_prior, dtype=float), classes=tuple(classes)
    )


def make_estep_batch(model: HierarchicalModel, sequences, cache: EStepCache):
    """Repackage an E-step cache as (sequence, posterior, paths) triples."""
    from .inference import ClassPosterior

    out = []
    for n, seq in enumerate(sequences):
        cp = ClassPosterior(
            probs=cache.posteriors[n], per_class_loglik=cache.logliks[n]
        )
        out.append((seq, cp, cache.paths[n]))
    return out


def check_gradients(
    model: HierarchicalModel,
    sequences: Sequence[ScreeningSequence],
    optimize_class_prior: bool = False,
    step: float = 1e-6,
):
    """Central finite-difference sweep of the EMCLL gradient.

    Returns (max relative error, rows of (label, analytic, numeric, error))
    over every packed coordinate, with E-step quantities computed from the
    supplied model.
    """
    clusters = ClusterPartition.contiguous(len(sequences), max(len(sequences), 1))
    cache = e_step(model, sequences, clusters)
    batch = make_estep_batch(model, sequences, cache)
    problem = _make_problem(model, batch, optimize_class_prior)
    packer = problem.packer
    x0 = packer.pack(model)
    _, grad = problem.value_and_grad(x0)
    labels = packer.coordinate_labels()
    rows = []
    max_rel = 0.0
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        fd = (problem.value(xp) - problem.value(xm)) / (2 * step)
        denom = max(abs(grad[i]), abs(fd), 1e-8)
        rel = abs(grad[i] - fd) / denom
        max_rel = max(max_rel, rel)
        rows.append((labels[i], float(grad[i]), float(fd), float(rel)))
    return max_rel, rows
