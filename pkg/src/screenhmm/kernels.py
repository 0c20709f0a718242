"""Transition kernels for piecewise-constant Markov jump processes.

The transition matrix over an age interval is exp(Q * dt) within one
partition segment and the ordered product of per-segment exponentials when
the interval crosses cut points.  The exponential uses scaling-and-squaring
with a fixed-order (13/13) Pade kernel so results are deterministic and
batchable; Frechet derivatives come from the block identity

    exp([[A, E], [0, A]]) = [[exp(A), L(A, E)], [0, exp(A)]]

where L(A, E) is the derivative of exp at A in direction E.
"""

from __future__ import annotations

import numpy as np

from .model import AgePartition, PiecewiseIntensity, _readonly

# Pade-13 coefficients and the norm bound theta_13 (Higham 2005).
_PADE13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152

_ROWSUM_TOL = 1e-10
_ENTRY_SLACK = 1e-12


class IntensityError(ValueError):
    """Raised when a matrix is not a valid transition intensity matrix."""


def check_intensity(q: np.ndarray) -> np.ndarray:
    """Validate generator invariants; returns the matrix as float ndarray."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise IntensityError(f"intensity matrix must be square, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise IntensityError("intensity matrix has non-finite entries")
    off = q[~np.eye(q.shape[0], dtype=bool)]
    if off.size and off.min() < 0:
        raise IntensityError("off-diagonal intensities must be nonnegative")
    rowsum = np.abs(q.sum(axis=1))
    scale = np.maximum(1.0, np.abs(q).max(axis=1))
    if np.any(rowsum > 1e-12 * scale):
        raise IntensityError(f"intensity rows must sum to 0, got sums {q.sum(axis=1)}")
    return q


def expm_many(mats: np.ndarray) -> np.ndarray:
    """exp of a stack of square matrices, shape (n, m, m) -> (n, m, m)."""
    a = np.asarray(mats, dtype=float)
    single = a.ndim == 2
    if single:
        a = a[None]
    n, m, _ = a.shape
    if n == 0:
        return a.copy()
    norms = np.abs(a).sum(axis=-2).max(axis=-1)           # 1-norm per matrix
    with np.errstate(divide="ignore"):
        s = np.ceil(np.log2(norms / _THETA13))
    s = np.where(np.isfinite(s), np.maximum(s, 0), 0).astype(int)
    a = a / (2.0 ** s)[:, None, None]

    ident = np.broadcast_to(np.eye(m), (n, m, m))
    b = _PADE13
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
             + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = (a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
         + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident)
    r = np.linalg.solve(v - u, v + u)

    for i in range(int(s.max()) if n else 0):
        todo = s > i
        if not np.any(todo):
            break
        r[todo] = r[todo] @ r[todo]
    return r[0] if single else r


def frechet_many(mats: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Directional derivatives of exp for stacks of matrices.

    Returns L(A_i, E_i) for each pair, via the 2m x 2m block construction.
    """
    a = np.asarray(mats, dtype=float)
    e = np.asarray(directions, dtype=float)
    single = a.ndim == 2
    if single:
        a, e = a[None], e[None]
    n, m, _ = a.shape
    block = np.zeros((n, 2 * m, 2 * m))
    block[:, :m, :m] = a
    block[:, :m, m:] = e
    block[:, m:, m:] = a
    full = expm_many(block)
    out = full[:, :m, m:]
    return out[0] if single else out


class TransitionMatrixError(ValueError):
    """Raised when computed transition probabilities violate invariants."""


class TransitionMatrix:
    """Row-stochastic transition probabilities over [from_age, to_age).

    Construction verifies row sums (1e-10) and entry bounds (1e-12 slack);
    violations raise instead of being silently renormalized, since they
    indicate an invalid intensity upstream.
    """

    __slots__ = ("entries", "from_age", "to_age")

    def __init__(self, entries: np.ndarray, from_age: float, to_age: float):
        entries = _readonly(entries)
        rowsum = entries.sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > _ROWSUM_TOL):
            raise TransitionMatrixError(f"row sums deviate from 1: {rowsum}")
        if entries.min() < -_ENTRY_SLACK or entries.max() > 1.0 + _ENTRY_SLACK:
            raise TransitionMatrixError("entries outside [0, 1] beyond slack")
        self.entries = entries
        self.from_age = float(from_age)
        self.to_age = float(to_age)

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    def log_entries(self) -> np.ndarray:
        """log of entries with negatives-within-slack treated as 0."""
        with np.errstate(divide="ignore"):
            return np.log(np.clip(self.entries, 0.0, None))


def expm(rate_matrix: np.ndarray, duration: float) -> TransitionMatrix:
    """Transition matrix exp(Q * duration) of a homogeneous jump process."""
    q = check_intensity(rate_matrix)
    if duration < 0:
        raise ValueError(f"duration must be nonnegative, got {duration}")
    return TransitionMatrix(expm_many(q * duration), 0.0, duration)


def expm_with_directional_derivative(
    rate_matrix: np.ndarray, duration: float, direction: np.ndarray
) -> tuple[TransitionMatrix, np.ndarray]:
    """exp(Q t) together with its derivative in the given Q-direction.

    The derivative is d/dh exp((Q + h E) t) at h = 0, read off the
    upper-right block of exp([[Qt, Et], [0, Qt]]).
    """
    q = check_intensity(rate_matrix)
    if duration < 0:
        raise ValueError(f"duration must be nonnegative, got {duration}")
    e = np.asarray(direction, dtype=float)
    if e.shape != q.shape:
        raise ValueError("direction must have the same shape as the rate matrix")
    m = q.shape[0]
    block = np.zeros((2 * m, 2 * m))
    block[:m, :m] = q * duration
    block[:m, m:] = e * duration
    block[m:, m:] = q * duration
    full = expm_many(block)
    return TransitionMatrix(full[:m, :m], 0.0, duration), full[:m, m:]


def interval_transition(
    intensity: PiecewiseIntensity, from_age: float, to_age: float
) -> TransitionMatrix:
    """Transition matrix over [from_age, to_age) under piecewise-constant Q.

    The interval is split at partition cuts and the per-segment
    exponentials are multiplied in age order; a zero-length interval gives
    the identity.
    """
    pieces = intensity.partition.pieces(from_age, to_age)  # validates the interval
    m = intensity.n_states
    if not pieces:
        return TransitionMatrix(np.eye(m), from_age, to_age)
    mats = np.stack([intensity.segments[k] * dt for k, dt in pieces])
    ps = expm_many(mats)
    out = ps[0]
    for p in ps[1:]:
        out = out @ p
    return TransitionMatrix(out, from_age, to_age)


def interval_transitions_batch(
    intensity: PiecewiseIntensity,
    spans: list[tuple[float, float]],
) -> list[np.ndarray]:
    """Transition matrices for many intervals with one batched exponential.

    Equivalent to [interval_transition(intensity, a, b).entries for a, b in
    spans] but exponentiates all segment pieces in a single call, which is
    what makes batched inference fast.
    """
    part = intensity.partition
    piece_mats = []
    owners: list[list[int]] = []
    for a, b in spans:
        idx = []
        for k, dt in part.pieces(a, b):
            idx.append(len(piece_mats))
            piece_mats.append(intensity.segments[k] * dt)
        owners.append(idx)
    m = intensity.n_states
    ps = expm_many(np.stack(piece_mats)) if piece_mats else np.zeros((0, m, m))
    eye = np.eye(m)
    out = []
    for idx in owners:
        if not idx:
            out.append(eye)
        elif len(idx) == 1:
            out.append(ps[idx[0]])
        else:
            acc = ps[idx[0]]
            for i in idx[1:]:
                acc = acc @ ps[i]
            out.append(acc)
    return out
