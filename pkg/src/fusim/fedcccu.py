"""Cross-client constrained unlearning via attribution-ranked neuron edits.

Each client scores how much every hidden unit contributes to predicting the
forget class on its own data (a Riemann-sum path integral of the probability
gradient as the unit's activation scales from 0 to its observed value), and
uploads only its top-N (unit, score) records.  The server compares the
requesting client's scores against the best score any other client reported
for the same unit: units with a low ratio are dominated by the requester and
safe to zero, units with ratio near 1 are shared and kept.  The edit itself
zeroes incoming weights and biases, identically to the naive zeroing route.

Raw examples never leave the clients; the server-side steps consume
SensitivityReports only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nncore
from .datasets import LabeledExample
from .fedsim import ClientState, UnlearnRequest
from .nncore import ModelSpec, ParameterSet, UnitId, make_rng
from .unlearn_routes import editable_units


class CccuError(ValueError):
    pass


@dataclass(frozen=True)
class SensitivityRecord:
    unit: UnitId
    class_id: int
    score: float


@dataclass(frozen=True)
class SensitivityReport:
    client_id: int
    per_class: dict[int, tuple[SensitivityRecord, ...]]

    def records_for(self, class_id: int) -> tuple[SensitivityRecord, ...]:
        return self.per_class.get(class_id, ())


@dataclass(frozen=True)
class DominanceEntry:
    unit: UnitId
    s_forget: float
    s_max_other: float
    ratio: float


@dataclass(frozen=True)
class RankSelection:
    units: tuple[UnitId, ...]
    requested: int
    capped: bool  # true when fewer entries existed than were requested


@dataclass(frozen=True)
class CccuConfig:
    riemann_steps: int = 20    # m
    top_n: int = 32            # N records uploaded per class
    select_n: int = 16         # n units zeroed
    probe_cap: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.riemann_steps < 1:
            raise CccuError("riemann_steps must be >= 1")
        if self.top_n < 1 or self.select_n < 0 or self.probe_cap < 1:
            raise CccuError("bad top_n / select_n / probe_cap")


@dataclass
class AuditRecord:
    forget_class: int
    requesting_clients: tuple[int, ...]
    reports: list[SensitivityReport]
    entries: list[DominanceEntry]
    selection: RankSelection
    config: CccuConfig

    def to_json(self) -> str:
        doc = {
            "forget_class": self.forget_class,
            "requesting_clients": list(self.requesting_clients),
            "config": {
                "riemann_steps": self.config.riemann_steps,
                "top_n": self.config.top_n,
                "select_n": self.config.select_n,
                "probe_cap": self.config.probe_cap,
                "seed": self.config.seed,
            },
            "reports": [
                {
                    "client": r.client_id,
                    "classes": {
                        str(cid): [
                            {"layer": rec.unit.layer, "unit": rec.unit.unit,
                             "score": rec.score}
                            for rec in recs
                        ]
                        for cid, recs in sorted(r.per_class.items())
                    },
                }
                for r in self.reports
            ],
            "entries": [
                {"layer": e.unit.layer, "unit": e.unit.unit,
                 "s_forget": e.s_forget, "s_max_other": e.s_max_other, "r": e.ratio}
                for e in self.entries
            ],
            "selected": [u.as_dict() for u in self.selection.units],
            "selection_capped": self.selection.capped,
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def report_to_json(report: SensitivityReport) -> str:
    """Wire format for one client's upload."""
    doc = {
        "client": report.client_id,
        "classes": {
            str(cid): [
                {"layer": rec.unit.layer, "unit": rec.unit.unit, "score": rec.score}
                for rec in recs
            ]
            for cid, recs in sorted(report.per_class.items())
        },
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def report_from_json(text: str) -> SensitivityReport:
    doc = json.loads(text)
    per_class = {
        int(cid): tuple(
            SensitivityRecord(UnitId(r["layer"], r["unit"]), int(cid), r["score"])
            for r in recs)
        for cid, recs in doc["classes"].items()
    }
    return SensitivityReport(int(doc["client"]), per_class)


# ---------------------------------------------------------------------------
# Attribution


def attribute_unit(spec: ModelSpec, params: ParameterSet, inputs: np.ndarray,
                   target_class: int, unit: UnitId, m: int) -> float:
    """Riemann-sum attribution of one unit for one input.

    (beta / m) * sum_{j=1..m} dP(target | input) / d(activation) evaluated at
    activation = (j/m) * beta, where beta is the unit's plain activation.
    """
    if m < 1:
        raise CccuError("m must be >= 1")
    values = _attributions_for_unit(spec, params,
                                    np.asarray(inputs, dtype=np.float64)[None],
                                    target_class, unit, m)
    return float(values[0])


def _attributions_for_unit(spec: ModelSpec, params: ParameterSet, xs: np.ndarray,
                           target_class: int, unit: UnitId, m: int) -> np.ndarray:
    """Per-sample attribution of one unit over a batch, one engine pass."""
    spec.validate_unit(unit)
    n = xs.shape[0]
    betas = nncore.batch_unit_activations(spec, params, xs)[unit.layer][:, unit.unit]
    steps = np.arange(1, m + 1, dtype=np.float64) / m
    rep_x = np.repeat(xs, m, axis=0)
    scales = np.tile(steps, n)
    grads = nncore.batch_unit_gradients(spec, params, rep_x, target_class, unit, scales)
    grad_sums = grads.reshape(n, m).sum(axis=1)
    return betas / m * grad_sums


def sensitivity_scores(spec: ModelSpec, params: ParameterSet,
                       examples: list[LabeledExample], target_class: int,
                       m: int) -> list[SensitivityRecord]:
    """Mean attribution per editable unit over the given examples."""
    if not examples:
        raise CccuError("sensitivity_scores needs a nonempty shard")
    if not 0 <= target_class < spec.class_count:
        raise CccuError(f"target class {target_class} out of range")
    xs = np.stack([ex.image for ex in examples])
    records = []
    for unit in editable_units(spec):
        values = _attributions_for_unit(spec, params, xs, target_class, unit, m)
        records.append(SensitivityRecord(unit, target_class, float(values.mean())))
    return records


def top_n_report(scores: list[SensitivityRecord], client_id: int,
                 top_n: int) -> SensitivityReport:
    """Keep the N best-scoring records per class, descending, ties by address."""
    if top_n < 1:
        raise CccuError("top_n must be >= 1")
    by_class: dict[int, list[SensitivityRecord]] = {}
    for rec in scores:
        by_class.setdefault(rec.class_id, []).append(rec)
    per_class = {}
    for cid, recs in by_class.items():
        recs.sort(key=lambda r: (-r.score, r.unit.layer, r.unit.unit))
        per_class[cid] = tuple(recs[:top_n])
    return SensitivityReport(client_id, per_class)


# ---------------------------------------------------------------------------
# Server side


def compute_dominance(reports: list[SensitivityReport], forget_client: int,
                      forget_class: int,
                      exclude: set[int] | None = None) -> list[DominanceEntry]:
    """Per unit in the forget client's list: ratio of the best score any
    non-forgetting client reported for the unit to the forget client's score.

    Units the forget client scored at or below zero are dropped: the ratio is
    undefined or sign-flipped there and such units do not support the class.
    Absence from every other list floors s_max_other at zero, so the ratio is
    never negative.
    """
    excluded = set(exclude) if exclude is not None else {forget_client}
    excluded.add(forget_client)
    forget_report = next((r for r in reports if r.client_id == forget_client), None)
    if forget_report is None:
        raise CccuError(f"no report from forget client {forget_client}")
    forget_records = forget_report.records_for(forget_class)
    if not forget_records:
        raise CccuError(
            f"forget client {forget_client} has no class-{forget_class} records")
    other_scores: dict[UnitId, float] = {}
    for report in reports:
        if report.client_id in excluded:
            continue
        for rec in report.records_for(forget_class):
            prev = other_scores.get(rec.unit)
            if prev is None or rec.score > prev:
                other_scores[rec.unit] = rec.score
    entries = []
    for rec in forget_records:
        if rec.score <= 0.0:
            continue
        s_max_other = max(0.0, other_scores.get(rec.unit, 0.0))
        entries.append(DominanceEntry(rec.unit, rec.score, s_max_other,
                                      s_max_other / rec.score))
    return entries


def rank_select(entries: list[DominanceEntry], n: int) -> RankSelection:
    """Ascending-ratio selection of n units; ties prefer higher s_forget."""
    if n < 0:
        raise CccuError("n must be >= 0")
    ordered = sorted(entries, key=lambda e: (e.ratio, -e.s_forget,
                                             e.unit.layer, e.unit.unit))
    capped = n > len(ordered)
    return RankSelection(tuple(e.unit for e in ordered[:min(n, len(ordered))]),
                         requested=n, capped=capped)


def apply_unlearning(spec: ModelSpec, params: ParameterSet,
                     units) -> ParameterSet:
    """Zero the selected units' incoming weights and biases; idempotent."""
    return nncore.zero_units(spec, params, units)


# ---------------------------------------------------------------------------
# Orchestration


def probe_examples(state: ClientState, forget_class: int, probe_cap: int,
                    seed) -> list[LabeledExample]:
    candidates = [ex for ex in state.examples if ex.label == forget_class]
    if len(candidates) <= probe_cap:
        return candidates
    rng = make_rng((seed, state.client_id), 801)
    picks = sorted(rng.choice(len(candidates), size=probe_cap, replace=False).tolist())
    return [candidates[i] for i in picks]


def fedcccu_pipeline(spec: ModelSpec, global_params: ParameterSet,
                     clients: list[ClientState], request: UnlearnRequest,
                     config: CccuConfig) -> tuple[ParameterSet, AuditRecord]:
    """Full protocol: local scoring, top-N upload, dominance, selection, edit.

    Clients attribute the forget class over their own forget-class examples
    (capped at probe_cap); clients holding none upload an empty report.
    """
    forget_class = request.forget_class
    if not 0 <= forget_class < spec.class_count:
        raise CccuError(f"forget class {forget_class} out of range")
    reports = []
    for state in sorted(clients, key=lambda c: c.client_id):
        probes = probe_examples(state, forget_class, config.probe_cap, config.seed)
        if probes:
            scores = sensitivity_scores(spec, global_params, probes, forget_class,
                                        config.riemann_steps)
            reports.append(top_n_report(scores, state.client_id, config.top_n))
        else:
            reports.append(SensitivityReport(state.client_id, {}))
    requesters = set(request.client_ids)
    merged: dict[UnitId, DominanceEntry] = {}
    for rid in sorted(requesters):
        report = next(r for r in reports if r.client_id == rid)
        if not report.records_for(forget_class):
            continue
        for entry in compute_dominance(reports, rid, forget_class, exclude=requesters):
            prev = merged.get(entry.unit)
            if prev is None or entry.ratio < prev.ratio:
                merged[entry.unit] = entry
    entries = sorted(merged.values(),
                     key=lambda e: (e.ratio, -e.s_forget, e.unit.layer, e.unit.unit))
    selection = rank_select(entries, config.select_n)
    edited = apply_unlearning(spec, global_params, selection.units)
    audit = AuditRecord(forget_class, request.client_ids, reports, entries,
                        selection, config)
    return edited, audit
