"""Bijection between model parameters and an unconstrained vector.

Positive rates map through log, simplex-valued distributions through the
multinomial-logit transform with the last free category as reference, so
any real vector decodes to a valid model.  Structural entries stay fixed:
the death state's intensity row and emission parameters, the death entry
of initial distributions (required to be exactly 0), masked-off
transitions, and, unless requested, the class prior.

Round trips are exact up to floating-point log/exp error (~1e-15
relative); tests pin that level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    ClassComponent,
    EmissionModel,
    HierarchicalModel,
    PiecewiseIntensity,
)


@dataclass
class _EmissionLayout:
    class_indices: tuple[int, ...]   # classes sharing this emission block
    rate_offset: int
    grade_offset: int
    emit_states: tuple[int, ...]     # all states except death


class ParameterPacker:
    """Packs/unpacks every trainable parameter of a hierarchical model.

    Layout (offsets fixed at construction from a template model):
      per class: log intensities of allowed entries, segment-major
                 row-major; then initial-distribution logits per segment
                 (non-death states, last as reference);
      per distinct emission model: log rates then grade logits over
                 non-death states;
      optionally: class-prior logits.
    """

    def __init__(self, template: HierarchicalModel, optimize_class_prior: bool = False):
        self.template = template
        self.optimize_class_prior = optimize_class_prior
        self.n_segments = template.partition.n_segments

        offset = 0
        self.intensity_offsets = []
        self.intensity_indices = []      # (i_idx, j_idx) per class
        for comp in template.classes:
            i_idx, j_idx = np.nonzero(comp.intensity.allowed)
            self.intensity_indices.append((i_idx, j_idx))
            self.intensity_offsets.append(offset)
            offset += self.n_segments * i_idx.size
        self.n_intensity_params = offset

        self.initial_offsets = []
        self.initial_free_states = []    # non-death states per class
        for comp in template.classes:
            death = comp.death_state
            free = tuple(s for s in range(comp.n_states) if s != death)
            if death is not None and np.any(comp.initial[:, death] != 0):
                raise ValueError(
                    "initial distributions must place zero mass on the death state "
                    "to be trainable"
                )
            self.initial_free_states.append(free)
            self.initial_offsets.append(offset)
            offset += self.n_segments * (len(free) - 1)

        self.emission_layouts: list[_EmissionLayout] = []
        seen: dict[int, int] = {}
        for z, comp in enumerate(template.classes):
            key = id(comp.emission)
            if key in seen:
                lay = self.emission_layouts[seen[key]]
                lay.class_indices = lay.class_indices + (z,)
                continue
            em = comp.emission
            emit_states = tuple(s for s in range(em.n_states) if s != em.death_state)
            rate_offset = offset
            offset += len(emit_states) * em.n_tests
            grade_offset = offset
            offset += len(emit_states) * sum(l - 1 for l in em.levels)
            seen[key] = len(self.emission_layouts)
            self.emission_layouts.append(
                _EmissionLayout(
                    class_indices=(z,),
                    rate_offset=rate_offset,
                    grade_offset=grade_offset,
                    emit_states=emit_states,
                )
            )

        self.prior_offset = offset
        if optimize_class_prior:
            offset += template.n_classes - 1
        self.n_params = offset

    # -- helpers ----------------------------------------------------------

    def intensity_slice(self, z: int, segment: int) -> slice:
        i_idx, _ = self.intensity_indices[z]
        base = self.intensity_offsets[z] + segment * i_idx.size
        return slice(base, base + i_idx.size)

    @staticmethod
    def _simplex_to_logits(p: np.ndarray, where: str) -> np.ndarray:
        if np.any(p <= 0):
            raise ValueError(f"{where}: entries must be strictly positive to pack")
        return np.log(p[:-1]) - np.log(p[-1])

    @staticmethod
    def _logits_to_simplex(logits: np.ndarray) -> np.ndarray:
        full = np.concatenate([logits, [0.0]])
        full -= full.max()
        e = np.exp(full)
        return e / e.sum()

    # -- pack / unpack ----------------------------------------------------

    def pack(self, model: HierarchicalModel) -> np.ndarray:
        vec = np.empty(self.n_params)
        for z, comp in enumerate(model.classes):
            i_idx, j_idx = self.intensity_indices[z]
            for k, seg in enumerate(comp.intensity.segments):
                q = seg[i_idx, j_idx]
                if np.any(q <= 0):
                    raise ValueError(
                        f"classes[{z}].intensity[{k}]: allowed entries must be "
                        "strictly positive to pack"
                    )
                vec[self.intensity_slice(z, k)] = np.log(q)
            free = self.initial_free_states[z]
            width = len(free) - 1
            for k in range(self.n_segments):
                base = self.initial_offsets[z] + k * width
                vec[base:base + width] = self._simplex_to_logits(
                    comp.initial[k, list(free)], f"classes[{z}].initial[{k}]"
                )
        for lay in self.emission_layouts:
            em = model.classes[lay.class_indices[0]].emission
            rates = em.rates[list(lay.emit_states), :]
            if np.any(rates <= 0):
                raise ValueError("emission rates must be strictly positive to pack")
            n_rate = rates.size
            vec[lay.rate_offset:lay.rate_offset + n_rate] = np.log(rates).ravel()
            pos = lay.grade_offset
            for s in lay.emit_states:
                for k in range(em.n_tests):
                    w = em.levels[k] - 1
                    vec[pos:pos + w] = self._simplex_to_logits(
                        em.grade_probs[k][s], f"emission.grade_probs[{s}][{k}]"
                    )
                    pos += w
        if self.optimize_class_prior:
            vec[self.prior_offset:] = self._simplex_to_logits(
                model.class_prior, "class_prior"
            )
        return vec

    def unpack(self, vec: np.ndarray) -> HierarchicalModel:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected vector of length {self.n_params}")
        emissions: dict[int, EmissionModel] = {}
        for lay in self.emission_layouts:
            emissions[lay.class_indices[0]] = self._unpack_emission(vec, lay)
        classes = []
        for z, comp in enumerate(self.template.classes):
            i_idx, j_idx = self.intensity_indices[z]
            m = comp.n_states
            segs = []
            for k in range(self.n_segments):
                q = np.zeros((m, m))
                q[i_idx, j_idx] = np.exp(vec[self.intensity_slice(z, k)])
                np.fill_diagonal(q, -q.sum(axis=1))
                segs.append(q)
            intensity = PiecewiseIntensity(
                partition=comp.partition,
                segments=tuple(segs),
                allowed=comp.intensity.allowed,
            )
            free = self.initial_free_states[z]
            width = len(free) - 1
            initial = np.zeros((self.n_segments, m))
            for k in range(self.n_segments):
                base = self.initial_offsets[z] + k * width
                initial[k, list(free)] = self._logits_to_simplex(vec[base:base + width])
            emission = emissions.get(z)
            if emission is None:
                owner = next(
                    lay.class_indices[0]
                    for lay in self.emission_layouts
                    if z in lay.class_indices
                )
                emission = emissions[owner]
            classes.append(
                ClassComponent(
                    intensity=intensity,
                    initial=initial,
                    initial_priors=comp.initial_priors,
                    emission=emission,
                    normal_state=comp.normal_state,
                )
            )
        if self.optimize_class_prior:
            prior = self._logits_to_simplex(vec[self.prior_offset:])
        else:
            prior = self.template.class_prior
        return HierarchicalModel(class_prior=prior, classes=tuple(classes))

    def _unpack_emission(self, vec: np.ndarray, lay: _EmissionLayout) -> EmissionModel:
        em = self.template.classes[lay.class_indices[0]].emission
        rates = np.array(em.rates)
        n_emit = len(lay.emit_states)
        rates[list(lay.emit_states), :] = np.exp(
            vec[lay.rate_offset:lay.rate_offset + n_emit * em.n_tests]
        ).reshape(n_emit, em.n_tests)
        probs = [np.array(p) for p in em.grade_probs]
        pos = lay.grade_offset
        for s in lay.emit_states:
            for k in range(em.n_tests):
                w = em.levels[k] - 1
                probs[k][s] = self._logits_to_simplex(vec[pos:pos + w])
                pos += w
        return EmissionModel(
            rates=rates,
            grade_probs=tuple(probs),
            grade_priors=em.grade_priors,
            death_state=em.death_state,
        )

    def coordinate_labels(self) -> list[str]:
        """Human-readable name per vector coordinate (diagnostics)."""
        labels = [""] * self.n_params
        for z, comp in enumerate(self.template.classes):
            i_idx, j_idx = self.intensity_indices[z]
            for k in range(self.n_segments):
                sl = self.intensity_slice(z, k)
                for a, (i, j) in enumerate(zip(i_idx, j_idx)):
                    labels[sl.start + a] = f"class{z}.seg{k}.log_q[{i},{j}]"
            free = self.initial_free_states[z]
            width = len(free) - 1
            for k in range(self.n_segments):
                base = self.initial_offsets[z] + k * width
                for a in range(width):
                    labels[base + a] = f"class{z}.seg{k}.init_logit[{free[a]}]"
        for b, lay in enumerate(self.emission_layouts):
            em = self.template.classes[lay.class_indices[0]].emission
            pos = lay.rate_offset
            for s in lay.emit_states:
                for k in range(em.n_tests):
                    labels[pos] = f"emission{b}.log_rate[{s},{k}]"
                    pos += 1
            pos = lay.grade_offset
            for s in lay.emit_states:
                for k in range(em.n_tests):
                    for l in range(em.levels[k] - 1):
                        labels[pos] = f"emission{b}.grade_logit[{s},{k},{l}]"
                        pos += 1
        if self.optimize_class_prior:
            for z in range(self.template.n_classes - 1):
                labels[self.prior_offset + z] = f"class_prior_logit[{z}]"
        return labels
