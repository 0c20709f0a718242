"""File formats: model documents, records files, and run outputs.

Models persist as JSON: ``partition`` (interior cut points),
``class_prior``, per-class ``intensity[segment][row][col]``,
``initial[segment][state]`` and transition masks, and the emission block
with ``rates[state][test]`` and ``grade_probs[state][test][grade]``.
Records files hold one line per visit and test type
(``individual_id,age,test_type,grade_counts...,treated``) plus one
``CENSOR`` line per individual; floats are written with ``repr`` so round
trips are exact.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence

import numpy as np

from .model import (
    ALIVE,
    DEATH,
    AgePartition,
    ClassComponent,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
    ScreeningSequence,
    Visit,
    make_visit,
)

RECORDS_HEADER = "individual_id,age,test_type,grade_counts,treated"
CENSOR_TAG = "CENSOR"


class RecordsError(ValueError):
    """Raised with file/line context when a records file cannot be parsed."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


# ---------------------------------------------------------------------------
# Model persistence


def _emission_to_dict(em: EmissionModel) -> dict:
    return {
        "rates": em.rates.tolist(),
        "grade_probs": [
            [em.grade_probs[k][s].tolist() for k in range(em.n_tests)]
            for s in range(em.n_states)
        ],
        "grade_priors": [
            [em.grade_priors[k][s].tolist() for k in range(em.n_tests)]
            for s in range(em.n_states)
        ],
        "death_state": em.death_state,
    }


def _emission_from_dict(d: dict) -> EmissionModel:
    rates = np.asarray(d["rates"], dtype=float)
    m, k_n = rates.shape
    probs = tuple(
        np.asarray([d["grade_probs"][s][k] for s in range(m)], dtype=float)
        for k in range(k_n)
    )
    priors = tuple(
        np.asarray([d["grade_priors"][s][k] for s in range(m)], dtype=float)
        for k in range(k_n)
    )
    return EmissionModel(
        rates=rates,
        grade_probs=probs,
        grade_priors=priors,
        death_state=d.get("death_state"),
    )


def model_to_dict(model: HierarchicalModel) -> dict:
    doc = {
        "partition": list(model.partition.cuts),
        "class_prior": model.class_prior.tolist(),
        "classes": [],
    }
    shared = model.shared_emission
    if shared:
        doc["emission"] = _emission_to_dict(model.classes[0].emission)
    for comp in model.classes:
        entry = {
            "intensity": [seg.tolist() for seg in comp.intensity.segments],
            "allowed_transitions": comp.intensity.allowed.astype(int).tolist(),
            "initial": comp.initial.tolist(),
            "initial_priors": comp.initial_priors.tolist(),
            "normal_state": comp.normal_state,
        }
        if not shared:
            entry["emission"] = _emission_to_dict(comp.emission)
        doc["classes"].append(entry)
    return doc


def model_from_dict(doc: dict) -> HierarchicalModel:
    partition = AgePartition(tuple(doc["partition"]))
    shared = _emission_from_dict(doc["emission"]) if "emission" in doc else None
    classes = []
    for entry in doc["classes"]:
        emission = (
            shared if "emission" not in entry else _emission_from_dict(entry["emission"])
        )
        if emission is None:
            raise ValueError("model document lacks an emission block")
        intensity = PiecewiseIntensity(
            partition=partition,
            segments=tuple(np.asarray(s, dtype=float) for s in entry["intensity"]),
            allowed=np.asarray(entry["allowed_transitions"], dtype=bool),
        )
        classes.append(
            ClassComponent(
                intensity=intensity,
                initial=np.asarray(entry["initial"], dtype=float),
                initial_priors=np.asarray(entry["initial_priors"], dtype=float),
                emission=emission,
                normal_state=int(entry.get("normal_state", 0)),
            )
        )
    return HierarchicalModel(
        class_prior=np.asarray(doc["class_prior"], dtype=float),
        classes=tuple(classes),
    )


def save_model(model: HierarchicalModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path) -> HierarchicalModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# Records files


def write_records(sequences: Sequence[ScreeningSequence], path) -> None:
    with open(path, "w") as fh:
        fh.write(RECORDS_HEADER + "\n")
        for n, seq in enumerate(sequences):
            sid = seq.sequence_id if seq.sequence_id is not None else str(n)
            for v in seq.visits:
                for k in range(v.n_tests):
                    grades = ",".join(str(int(g)) for g in v.results[k])
                    fh.write(
                        f"{sid},{v.age!r},{k},{grades},{int(v.treated)}\n"
                    )
            fh.write(f"{sid},{CENSOR_TAG},{seq.censor_age!r},{seq.censor_outcome}\n")


def read_records(path) -> list[ScreeningSequence]:
    """Parse a records file; visits group by (individual, age)."""
    visits_by_id: dict[str, dict[float, dict]] = {}
    censor_by_id: dict[str, tuple[float, str]] = {}
    order: list[str] = []
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or (line_no == 1 and line.startswith("individual_id")):
                continue
            parts = line.split(",")
            if len(parts) < 4:
                raise RecordsError(path, line_no, f"expected >= 4 fields, got {len(parts)}")
            sid = parts[0]
            if sid not in visits_by_id:
                visits_by_id[sid] = {}
                order.append(sid)
            if parts[1] == CENSOR_TAG:
                if len(parts) != 4:
                    raise RecordsError(path, line_no, "censor line needs 4 fields")
                try:
                    age = float(parts[2])
                except ValueError:
                    raise RecordsError(path, line_no, f"bad censor age {parts[2]!r}")
                if parts[3] not in (ALIVE, DEATH):
                    raise RecordsError(
                        path, line_no, f"outcome must be {ALIVE!r} or {DEATH!r}"
                    )
                if sid in censor_by_id:
                    raise RecordsError(path, line_no, f"duplicate censor line for {sid!r}")
                censor_by_id[sid] = (age, parts[3])
                continue
            if len(parts) < 5:
                raise RecordsError(path, line_no, f"expected >= 5 fields, got {len(parts)}")
            try:
                age = float(parts[1])
                test_type = int(parts[2])
                grades = [int(g) for g in parts[3:-1]]
                treated = bool(int(parts[-1]))
            except ValueError as exc:
                raise RecordsError(path, line_no, f"malformed visit line: {exc}")
            if test_type < 0:
                raise RecordsError(path, line_no, f"negative test type {test_type}")
            visit = visits_by_id[sid].setdefault(
                age, {"results": {}, "treated": treated, "line": line_no}
            )
            if visit["treated"] != treated:
                raise RecordsError(
                    path, line_no, f"conflicting treated flags for {sid!r} at age {age}"
                )
            if test_type in visit["results"]:
                raise RecordsError(
                    path, line_no, f"duplicate test type {test_type} for {sid!r} at age {age}"
                )
            visit["results"][test_type] = np.asarray(grades, dtype=np.int64)

    levels: dict[int, int] = {}
    for visits in visits_by_id.values():
        for v in visits.values():
            for k, g in v["results"].items():
                if levels.setdefault(k, g.shape[0]) != g.shape[0]:
                    raise RecordsError(
                        path, v["line"], f"inconsistent level count for test type {k}"
                    )
    k_n = max(levels) + 1 if levels else 0
    if sorted(levels) != list(range(k_n)):
        raise RecordsError(path, 1, "test types must be contiguous from 0")

    sequences = []
    for sid in order:
        if sid not in censor_by_id:
            raise RecordsError(path, 1, f"individual {sid!r} has no censor line")
        censor_age, outcome = censor_by_id[sid]
        visits = []
        for age in sorted(visits_by_id[sid]):
            v = visits_by_id[sid][age]
            results = []
            counts = []
            for k in range(k_n):
                g = v["results"].get(k)
                if g is None:
                    g = np.zeros(levels[k], dtype=np.int64)
                results.append(g)
                counts.append(int(g.sum()))
            visits.append(
                make_visit(
                    age=age,
                    counts=np.asarray(counts, dtype=np.int64),
                    results=tuple(results),
                    treated=v["treated"],
                )
            )
        try:
            sequences.append(
                ScreeningSequence(
                    visits=tuple(visits),
                    censor_age=censor_age,
                    censor_outcome=outcome,
                    sequence_id=sid,
                )
            )
        except ValueError as exc:
            raise RecordsError(path, 1, f"individual {sid!r}: {exc}")
    return sequences


# ---------------------------------------------------------------------------
# Sidecar truth, traces, metrics, curves


def write_truth(truths, path) -> None:
    """JSON-lines sidecar: individual id -> (class, jump ages, states)."""
    with open(path, "w") as fh:
        for sid, z, traj in truths:
            fh.write(
                json.dumps(
                    {
                        "id": sid,
                        "class": int(z),
                        "start_age": traj.start_age,
                        "end_age": traj.end_age,
                        "jump_ages": list(traj.jump_ages),
                        "states": [int(s) for s in traj.states],
                        "reset_ages": list(traj.reset_ages),
                    }
                )
                + "\n"
            )


def read_truth(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_ll_trace(trace: Sequence[float], path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,marginal_loglik\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v!r}\n")


def write_fit_report(report, path) -> None:
    doc = {
        "loglik_trace": list(report.loglik_trace),
        "final_loglik": report.final_loglik,
        "converged": report.converged,
        "mstep_objectives": [list(t) for t in report.mstep_objectives],
        "gradient_norms": [list(t) for t in report.gradient_norms],
        "wall_clock": report.wall_clock,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def write_metrics(metrics: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for key, value in metrics.items():
            fh.write(f"{key},{value!r}\n")


def write_km_curves(band: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("time,survival,lower,upper\n")
        for t, s, lo, hi in zip(
            band["grid"], band["median"], band["lower"], band["upper"]
        ):
            fh.write(f"{t!r},{s!r},{lo!r},{hi!r}\n")


def write_predictions(rows, path) -> None:
    """Per-individual prediction rows: id, p_star, hard label, truth."""
    with open(path, "w") as fh:
        fh.write("individual_id,p_star,hard_label,truth\n")
        for sid, p_star, label, truth in rows:
            fh.write(f"{sid},{p_star!r},{label},{truth}\n")


def write_diagnostics(sequences, component, path) -> None:
    """Per-visit smoothed probabilities and Viterbi states, one CSV block."""
    from .inference import diagnostics_rows

    m = component.n_states
    header = "individual_id,age," + ",".join(f"p_state{j}" for j in range(m)) + ",viterbi"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for n, seq in enumerate(sequences):
            sid = seq.sequence_id if seq.sequence_id is not None else str(n)
            for row in diagnostics_rows(seq, component):
                age, *probs, state = row
                fields = [sid, repr(float(age))] + [repr(float(p)) for p in probs]
                fh.write(",".join(fields) + f",{int(state)}\n")
