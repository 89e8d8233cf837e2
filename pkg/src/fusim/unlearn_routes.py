"""Baseline unlearning routes: delete-retrain, relabel-poison, neuron zeroing.

The first two edit the requesting client's shard and rely on fair retraining
rounds; the third edits the model directly by zeroing the units most
activated by forget-class probes.  Unit ranking and edits address hidden
parameterized layers only: output-layer units are class logits whose scale is
not comparable to hidden activations, and zeroing them is label suppression
rather than representation removal.
"""
from __future__ import annotations

import numpy as np

from . import nncore
from .datasets import LabeledExample
from .nncore import ModelSpec, ParameterSet, UnitId, make_rng


class RouteError(ValueError):
    pass


def editable_units(spec: ModelSpec) -> list[UnitId]:
    """Units of every parameterized layer except the final (output) one."""
    if spec.param_layer_count < 2:
        return []
    return [UnitId(l, k)
            for l in range(spec.param_layer_count - 1)
            for k in range(spec.unit_count(l))]


def delete_retrain_prepare(shard: list[LabeledExample],
                           forget_class: int) -> list[LabeledExample]:
    """Drop every forget-class example, preserving order."""
    kept = [ex for ex in shard if ex.label != forget_class]
    if not kept:
        raise RouteError("deleting the forget class empties the shard")
    return kept


def relabel_poison_prepare(shard: list[LabeledExample], forget_class: int,
                           class_count: int, seed) -> list[LabeledExample]:
    """Rewrite forget-class labels to uniform draws over the other classes."""
    if class_count < 2:
        raise RouteError("relabeling needs at least two classes")
    rng = make_rng(seed, 701)
    out = []
    for ex in shard:
        if ex.label == forget_class:
            draw = int(rng.integers(0, class_count - 1))
            new_label = draw if draw < forget_class else draw + 1
            out.append(LabeledExample(ex.image, new_label))
        else:
            out.append(ex)
    return out


def rank_units_by_activation(spec: ModelSpec, params: ParameterSet,
                             probes: list[LabeledExample],
                             forget_class: int) -> list[tuple[UnitId, float]]:
    """Editable units sorted by mean activation over forget-class probes."""
    forget = [ex for ex in probes if ex.label == forget_class]
    if not forget:
        raise RouteError("probe set contains no forget-class examples")
    xs = np.stack([ex.image for ex in forget])
    acts = nncore.batch_unit_activations(spec, params, xs)
    scored = []
    for unit in editable_units(spec):
        scored.append((unit, float(acts[unit.layer][:, unit.unit].mean())))
    scored.sort(key=lambda t: (-t[1], t[0].layer, t[0].unit))
    return scored


def naive_zeroing(spec: ModelSpec, params: ParameterSet, forget_class: int,
                  probes: list[LabeledExample], top_m: int) -> ParameterSet:
    """Zero the top_m most forget-class-activated hidden units."""
    ranked = rank_units_by_activation(spec, params, probes, forget_class)
    if top_m < 0 or top_m > len(ranked):
        raise RouteError(
            f"top_m={top_m} outside [0, {len(ranked)}] editable units")
    selected = [unit for unit, _ in ranked[:top_m]]
    return nncore.zero_units(spec, params, selected)
