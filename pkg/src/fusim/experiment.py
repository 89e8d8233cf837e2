"""Experiment stages: partition, train, unlearn, evaluate, compare.

Stages read their prerequisites from the output directory when present and
build them otherwise, so any stage can resume from on-disk artifacts.  All
artifacts are pure functions of the config text: no timestamps, sorted keys,
fixed float formatting.  Files are written to a stage-local temp directory
and renamed into place on stage completion.
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass

import numpy as np

from . import evalkit, fedcccu, fedsim, nncore, unlearn_routes
from .config import ExperimentConfig
from .datasets import (DomainDataset, DomainSplits, load_idx, resize,
                       stratified_split, subset, SyntheticDomainSpec, synth_domain)
from .fedsim import ClientState, FedConfig, UnlearnRequest
from .nncore import ModelSpec, ParameterSet
from .partition import PartitionPlan, label_intersection, partition_dirichlet, partition_iid


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


ART = {
    "partition": "partition.json",
    "splits": "splits.json",
    "ckpt_trained": "checkpoint_trained.fusim",
    "rounds_train": "rounds_train.csv",
    "train_summary": "train_summary.json",
    "ckpt_unlearned": "checkpoint_unlearned.fusim",
    "rounds_unlearn": "rounds_unlearn.csv",
    "unlearn_summary": "unlearn_summary.json",
    "audit": "audit_fedcccu.json",
    "report_before_json": "report_before.json",
    "report_before_csv": "report_before.csv",
    "report_after_json": "report_after.json",
    "report_after_csv": "report_after.csv",
    "metrics": "metrics.json",
    "plot_data": "plot_data.csv",
}


class _StageWriter:
    """Collects artifact bytes, then renames them into place atomically."""

    def __init__(self, out_dir: str, stage: str):
        self.out_dir = out_dir
        self.tmp_dir = os.path.join(out_dir, f".tmp-{stage}")
        self.pending: dict[str, bytes] = {}

    def add_text(self, name: str, text: str) -> None:
        self.pending[name] = text.encode("utf-8")

    def add_bytes(self, name: str, data: bytes) -> None:
        self.pending[name] = data

    def commit(self) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        os.makedirs(self.tmp_dir, exist_ok=True)
        try:
            for name, data in self.pending.items():
                tmp = os.path.join(self.tmp_dir, name)
                with open(tmp, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, os.path.join(self.out_dir, name))
        finally:
            shutil.rmtree(self.tmp_dir, ignore_errors=True)


# ---------------------------------------------------------------------------
# Task assembly


@dataclass
class Task:
    spec: ModelSpec
    plan: PartitionPlan
    splits: dict[str, DomainSplits]
    train_domains: dict[str, DomainDataset]
    val_x: np.ndarray
    val_y: np.ndarray
    client_test_sets: dict[int, DomainDataset]
    class_count: int

    def build_clients(self) -> list[ClientState]:
        return fedsim.build_clients(self.plan, self.train_domains)


def build_raw_domains(cfg: ExperimentConfig) -> list[DomainDataset]:
    domains = []
    for dc in cfg.domains:
        if dc.kind == "idx":
            domains.append(load_idx(dc.images_path, dc.labels_path, domain_id=dc.name))
        else:
            spec = SyntheticDomainSpec(
                base_pattern_seed=cfg.base_pattern_seed,
                transforms=dc.transforms,
                resolution=dc.resolution,
                samples_per_class=dc.samples_per_class or cfg.samples_per_class,
                class_count=cfg.class_count)
            domains.append(synth_domain(spec, cfg.seed, domain_id=dc.name))
    return domains


def _compute_plan(cfg: ExperimentConfig,
                  train_domains: list[DomainDataset]) -> PartitionPlan:
    part = cfg.partition
    if part.strategy == "iid":
        return partition_iid(train_domains[0], part.clients, cfg.seed)
    if part.strategy == "dirichlet":
        return partition_dirichlet(train_domains[0], part.clients, part.alpha, cfg.seed)
    clients = []
    for g, (domain, size) in enumerate(zip(train_domains, part.group_sizes)):
        sub = partition_dirichlet(domain, size, part.alpha, (cfg.seed, 421, g))
        clients.extend(sub.clients)
    return PartitionPlan(tuple(clients), "real_noniid", cfg.seed, part.alpha)


def build_task(cfg: ExperimentConfig, plan: PartitionPlan | None = None,
               splits: dict[str, DomainSplits] | None = None) -> Task:
    raw = build_raw_domains(cfg)
    _, _, remapped = label_intersection(raw)
    processed = [resize(d, cfg.partition.working_resolution) for d in remapped]
    class_count = processed[0].class_count
    if splits is None:
        splits = {d.domain_id: stratified_split(d, cfg.evaluate.val_fraction,
                                                cfg.evaluate.test_fraction,
                                                (cfg.seed, 831))
                  for d in processed}
    by_id = {d.domain_id: d for d in processed}
    train_domains = {did: subset(by_id[did], sp.train) for did, sp in splits.items()}
    if plan is None:
        ordered_train = [train_domains[d.domain_id] for d in processed]
        plan = _compute_plan(cfg, ordered_train)
    val_sets = [subset(by_id[did], sp.val) for did, sp in sorted(splits.items())]
    val_x = np.concatenate([d.images() for d in val_sets])
    val_y = np.concatenate([d.labels() for d in val_sets])
    test_domains = {did: subset(by_id[did], sp.test) for did, sp in splits.items()}
    client_test_sets = {i: test_domains[c.domain_id]
                        for i, c in enumerate(plan.clients)}
    if cfg.model_spec == "small_mlp":
        spec = nncore.small_mlp((1, *cfg.partition.working_resolution), class_count,
                                hidden=cfg.hidden)
    else:
        spec = nncore.small_cnn((1, *cfg.partition.working_resolution), class_count)
    return Task(spec, plan, splits, train_domains, val_x, val_y,
                client_test_sets, class_count)


def _fed_config(cfg: ExperimentConfig) -> FedConfig:
    t = cfg.training
    return FedConfig(rounds_max=t.rounds_max, local_epochs=t.local_epochs,
                     batch_size=t.batch_size, learning_rate=t.learning_rate,
                     epsilon=t.epsilon, seed=cfg.seed,
                     unlearn_rounds_max=cfg.unlearn.rounds_max,
                     checkpoint_every=t.checkpoint_every)


def _splits_to_json(splits: dict[str, DomainSplits]) -> str:
    doc = {did: {"train": list(sp.train), "val": list(sp.val), "test": list(sp.test)}
           for did, sp in sorted(splits.items())}
    return json.dumps(doc, sort_keys=True, indent=1)


def _splits_from_json(text: str) -> dict[str, DomainSplits]:
    doc = json.loads(text)
    return {did: DomainSplits(tuple(v["train"]), tuple(v["val"]), tuple(v["test"]))
            for did, v in doc.items()}


# ---------------------------------------------------------------------------
# Stages


def ensure_partition(cfg: ExperimentConfig, out_dir: str) -> Task:
    plan_path = os.path.join(out_dir, ART["partition"])
    splits_path = os.path.join(out_dir, ART["splits"])
    plan = splits = None
    if os.path.exists(plan_path) and os.path.exists(splits_path):
        with open(plan_path) as fh:
            plan = PartitionPlan.from_json(fh.read())
        with open(splits_path) as fh:
            splits = _splits_from_json(fh.read())
        return build_task(cfg, plan, splits)
    task = build_task(cfg)
    writer = _StageWriter(out_dir, "partition")
    writer.add_text(ART["partition"], task.plan.to_json())
    writer.add_text(ART["splits"], _splits_to_json(task.splits))
    writer.commit()
    return task


def ensure_train(cfg: ExperimentConfig, out_dir: str, task: Task | None = None):
    ckpt = os.path.join(out_dir, ART["ckpt_trained"])
    summary_path = os.path.join(out_dir, ART["train_summary"])
    if task is None:
        task = ensure_partition(cfg, out_dir)
    if os.path.exists(ckpt) and os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        return task, nncore.load_checkpoint(ckpt), summary
    clients = task.build_clients()
    ckpt_dir = out_dir if cfg.training.checkpoint_every else None
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)
    result = fedsim.run_training(task.spec, clients, task.val_x, task.val_y,
                                 _fed_config(cfg), checkpoint_dir=ckpt_dir)
    summary = {
        "convergence_round": result.convergence_round,
        "rounds_run": len(result.logs),
        "final_val_error": result.logs[-1].val_error if result.logs else None,
    }
    writer = _StageWriter(out_dir, "train")
    buf_ckpt = os.path.join(out_dir, ".ckpt_trained.partial")
    nncore.save_checkpoint(buf_ckpt, result.params)
    with open(buf_ckpt, "rb") as fh:
        writer.add_bytes(ART["ckpt_trained"], fh.read())
    os.remove(buf_ckpt)
    writer.add_text(ART["rounds_train"], fedsim.round_logs_to_csv(
        result.logs, [c.client_id for c in clients]))
    writer.add_text(ART["train_summary"], json.dumps(summary, sort_keys=True, indent=1))
    writer.commit()
    return task, result.params, summary


def _route_request(cfg: ExperimentConfig) -> UnlearnRequest:
    return UnlearnRequest(cfg.unlearn.requesting_clients, cfg.unlearn.forget_class)


def run_route(cfg: ExperimentConfig, task: Task, trained: ParameterSet,
              start_round: int):
    """Apply the configured route; returns (params, unlearn logs, extras)."""
    route = cfg.unlearn.route
    u = cfg.unlearn
    extras: dict[str, object] = {"route": route}
    if route == "none":
        return trained, [], extras
    request = _route_request(cfg)
    clients = task.build_clients()
    by_id = {c.client_id: c for c in clients}
    if route in ("delete", "relabel"):
        for rid in request.client_ids:
            state = by_id[rid]
            if route == "delete":
                edited = unlearn_routes.delete_retrain_prepare(
                    state.examples, request.forget_class)
            else:
                edited = unlearn_routes.relabel_poison_prepare(
                    state.examples, request.forget_class, task.class_count,
                    seed=(cfg.seed, 853, rid))
            state.replace_shard(edited)
        pre_steps = {c.client_id: c.local_step_counter for c in clients}
        params, logs = fedsim.fair_unlearn_rounds(
            trained, task.spec, clients, request, task.val_x, task.val_y,
            _fed_config(cfg), start_round=start_round)
        extras["nonrequesting_steps"] = sum(
            c.local_step_counter - pre_steps[c.client_id]
            for c in clients if c.client_id not in request.client_ids)
        return params, logs, extras
    if route == "zeroing":
        probes = []
        for rid in request.client_ids:
            probes.extend(fedcccu.probe_examples(by_id[rid], request.forget_class,
                                                 u.probe_cap, cfg.seed))
        editable = unlearn_routes.editable_units(task.spec)
        top_m = max(1, round(u.top_m_fraction * len(editable)))
        params = unlearn_routes.naive_zeroing(task.spec, trained,
                                              request.forget_class, probes, top_m)
        extras["zeroed_units"] = top_m
        return params, [], extras
    if route == "fedcccu":
        cccu = fedcccu.CccuConfig(riemann_steps=u.riemann_steps, top_n=u.top_n,
                                  select_n=u.select_n, probe_cap=u.probe_cap,
                                  seed=cfg.seed)
        params, audit = fedcccu.fedcccu_pipeline(task.spec, trained, clients,
                                                 request, cccu)
        extras["audit"] = audit
        extras["selected_units"] = len(audit.selection.units)
        return params, [], extras
    raise StageError("unlearn", f"unknown route {route!r}")


def ensure_unlearn(cfg: ExperimentConfig, out_dir: str, task: Task | None = None):
    ckpt = os.path.join(out_dir, ART["ckpt_unlearned"])
    summary_path = os.path.join(out_dir, ART["unlearn_summary"])
    task, trained, train_summary = ensure_train(cfg, out_dir, task)
    if os.path.exists(ckpt) and os.path.exists(summary_path):
        with open(summary_path) as fh:
            return task, trained, nncore.load_checkpoint(ckpt), json.load(fh)
    params, logs, extras = run_route(cfg, task, trained,
                                     start_round=train_summary["rounds_run"])
    summary = {
        "route": cfg.unlearn.route,
        "unlearn_rounds_run": len(logs),
        "final_val_error": logs[-1].val_error if logs else None,
    }
    for key in ("nonrequesting_steps", "zeroed_units", "selected_units"):
        if key in extras:
            summary[key] = extras[key]
    writer = _StageWriter(out_dir, "unlearn")
    buf_ckpt = os.path.join(out_dir, ".ckpt_unlearned.partial")
    nncore.save_checkpoint(buf_ckpt, params)
    with open(buf_ckpt, "rb") as fh:
        writer.add_bytes(ART["ckpt_unlearned"], fh.read())
    os.remove(buf_ckpt)
    writer.add_text(ART["rounds_unlearn"], fedsim.round_logs_to_csv(
        logs, sorted(cfg.unlearn.requesting_clients)))
    writer.add_text(ART["unlearn_summary"], json.dumps(summary, sort_keys=True, indent=1))
    if "audit" in extras:
        writer.add_text(ART["audit"], extras["audit"].to_json())
    writer.commit()
    return task, trained, params, summary


def ensure_evaluate(cfg: ExperimentConfig, out_dir: str, task: Task | None = None):
    task, trained, unlearned, _ = ensure_unlearn(cfg, out_dir, task)
    before = evalkit.build_report(
        task.spec, trained, task.client_test_sets,
        metadata={"strategy": "before", "route": cfg.unlearn.route, "seed": cfg.seed})
    after = evalkit.build_report(
        task.spec, unlearned, task.client_test_sets,
        metadata={"strategy": "after", "route": cfg.unlearn.route, "seed": cfg.seed})
    request = _route_request(cfg)
    metrics = evalkit.forgetting_metrics(before, after, request)
    writer = _StageWriter(out_dir, "evaluate")
    writer.add_text(ART["report_before_json"], evalkit.report_to_json(before))
    writer.add_text(ART["report_before_csv"], evalkit.report_to_csv(before, "before"))
    writer.add_text(ART["report_after_json"], evalkit.report_to_json(after, metrics))
    writer.add_text(ART["report_after_csv"],
                    evalkit.report_to_csv(after, cfg.unlearn.route))
    writer.add_text(ART["metrics"], json.dumps({
        "route": cfg.unlearn.route,
        "forget_efficacy": metrics.forget_efficacy,
        "collateral_retained": metrics.collateral_retained,
        "collateral_nonrequesting_forget": metrics.collateral_nonrequesting_forget,
    }, sort_keys=True, indent=1))
    writer.add_text(ART["plot_data"], evalkit.plot_data_csv(
        {cfg.unlearn.route: (before.global_accuracy, after.global_accuracy)}))
    writer.commit()
    return task, before, after, metrics


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None):
    """All stages; returns (task, before report, after report, metrics)."""
    out = out_dir or cfg.out_dir
    return ensure_evaluate(cfg, out)


def compare_routes(cfgs: list[ExperimentConfig], out_dir: str) -> str:
    """Run one experiment per config (differing only in route) and merge."""
    if not cfgs:
        raise StageError("compare", "no configurations given")
    key = cfgs[0].comparable_key()
    for other in cfgs[1:]:
        if other.comparable_key() != key:
            raise StageError("compare", "configurations differ beyond unlearn.route")
    labels = []
    seen: dict[str, int] = {}
    for cfg in cfgs:
        route = cfg.unlearn.route
        seen[route] = seen.get(route, 0) + 1
        labels.append(route if seen[route] == 1 else f"{route}_{seen[route]}")
    reports: dict[str, "evalkit.EvaluationReport"] = {}
    befores = []
    plot: dict[str, tuple[float, float]] = {}
    for cfg, label in zip(cfgs, labels):
        sub = os.path.join(out_dir, f"route_{label}")
        _, before, after, _ = run_experiment(cfg, sub)
        befores.append(before)
        reports[label] = after
        plot[label] = (before.global_accuracy, after.global_accuracy)
    for b in befores[1:]:
        if not b.same_accuracies(befores[0]):
            raise StageError("compare", "pre-unlearning reports diverged across routes")
    merged = {"before": befores[0], **reports}
    text = evalkit.combined_csv(merged)
    writer = _StageWriter(out_dir, "compare")
    writer.add_text("compare.csv", text)
    writer.add_text("compare_plot_data.csv", evalkit.plot_data_csv(plot))
    writer.commit()
    return text
