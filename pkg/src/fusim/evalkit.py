"""Per-client per-class accuracy reports and forgetting metrics.

Reports hold exact correct/total counts so the pooled global accuracy is an
identity, not a rounding artifact.  CSV output mirrors the benchmark tables:
one row per (client, class), percentages with two decimals, one column per
strategy; JSON keeps raw ratios and round-trips exactly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .datasets import DomainDataset
from .fedsim import UnlearnRequest
from .nncore import ModelSpec, ParameterSet


class EvalError(ValueError):
    pass


@dataclass
class ClientEvaluation:
    class_correct: dict[int, int]
    class_total: dict[int, int]

    def accuracy(self, class_id: int) -> float:
        return self.class_correct[class_id] / self.class_total[class_id]

    @property
    def overall(self) -> float:
        return sum(self.class_correct.values()) / sum(self.class_total.values())


@dataclass
class EvaluationReport:
    clients: dict[int, ClientEvaluation]
    metadata: dict[str, object] = field(default_factory=dict)

    @property
    def global_correct(self) -> int:
        return sum(sum(c.class_correct.values()) for c in self.clients.values())

    @property
    def global_total(self) -> int:
        return sum(sum(c.class_total.values()) for c in self.clients.values())

    @property
    def global_accuracy(self) -> float:
        return self.global_correct / self.global_total

    @property
    def macro_global_accuracy(self) -> float:
        """Mean of per-client overall accuracies (alternative global view)."""
        return float(np.mean([c.overall for c in self.clients.values()]))

    def per_class(self, client_id: int) -> dict[int, float]:
        ev = self.clients[client_id]
        return {c: ev.accuracy(c) for c in sorted(ev.class_total)}

    def same_accuracies(self, other: "EvaluationReport") -> bool:
        if set(self.clients) != set(other.clients):
            return False
        for cid, ev in self.clients.items():
            oth = other.clients[cid]
            if ev.class_correct != oth.class_correct or ev.class_total != oth.class_total:
                return False
        return True


@dataclass(frozen=True)
class ForgettingMetrics:
    """Percentage-point accuracy drops derived from two reports.

    forget_efficacy: drop on the forget class at requesting clients.
    collateral_retained: mean drop over retained classes across all clients.
    collateral_nonrequesting_forget: forget-class drop at the other clients
    (0.0 when every client requested).
    """
    forget_efficacy: float
    collateral_retained: float
    collateral_nonrequesting_forget: float


def per_class_accuracy(spec: ModelSpec, params: ParameterSet,
                       shard: DomainDataset) -> dict[int, float]:
    """Argmax accuracy per class present in the shard."""
    ev = evaluate_client(spec, params, shard)
    return {c: ev.accuracy(c) for c in sorted(ev.class_total)}


def evaluate_client(spec: ModelSpec, params: ParameterSet,
                    shard: DomainDataset) -> ClientEvaluation:
    if len(shard) == 0:
        raise EvalError("cannot evaluate an empty shard")
    xs = shard.images()
    ys = shard.labels()
    preds = nncore.predict_probs(spec, params, xs).argmax(axis=1)
    correct: dict[int, int] = {}
    total: dict[int, int] = {}
    for c in np.unique(ys):
        mask = ys == c
        total[int(c)] = int(mask.sum())
        correct[int(c)] = int((preds[mask] == c).sum())
    return ClientEvaluation(correct, total)


def build_report(spec: ModelSpec, params: ParameterSet,
                 client_test_sets: dict[int, DomainDataset],
                 metadata: dict | None = None) -> EvaluationReport:
    clients = {cid: evaluate_client(spec, params, shard)
               for cid, shard in sorted(client_test_sets.items())}
    return EvaluationReport(clients, dict(metadata or {}))


def forgetting_metrics(before: EvaluationReport, after: EvaluationReport,
                       request: UnlearnRequest) -> ForgettingMetrics:
    if set(before.clients) != set(after.clients):
        raise EvalError("reports cover different clients")
    forget = request.forget_class
    req = set(request.client_ids)
    drops_forget_req = []
    drops_forget_other = []
    drops_retained = []
    for cid in sorted(before.clients):
        b, a = before.clients[cid], after.clients[cid]
        if set(b.class_total) != set(a.class_total) or b.class_total != a.class_total:
            raise EvalError(f"client {cid}: class coverage differs between reports")
        per_client_retained = []
        for c in sorted(b.class_total):
            drop = (b.accuracy(c) - a.accuracy(c)) * 100.0
            if c == forget:
                (drops_forget_req if cid in req else drops_forget_other).append(drop)
            else:
                per_client_retained.append(drop)
        if per_client_retained:
            drops_retained.append(float(np.mean(per_client_retained)))
    if not drops_forget_req:
        raise EvalError("no requesting client carries the forget class")
    return ForgettingMetrics(
        forget_efficacy=float(np.mean(drops_forget_req)),
        collateral_retained=float(np.mean(drops_retained)) if drops_retained else 0.0,
        collateral_nonrequesting_forget=(
            float(np.mean(drops_forget_other)) if drops_forget_other else 0.0),
    )


# ---------------------------------------------------------------------------
# Emission


def report_to_json(report: EvaluationReport,
                   metrics: ForgettingMetrics | None = None) -> str:
    doc = {
        "metadata": report.metadata,
        "global": {
            "correct": report.global_correct,
            "total": report.global_total,
            "accuracy": report.global_accuracy,
            "macro_accuracy": report.macro_global_accuracy,
        },
        "clients": {
            str(cid): {
                "overall": ev.overall,
                "classes": {
                    str(c): {"correct": ev.class_correct[c],
                             "total": ev.class_total[c],
                             "accuracy": ev.accuracy(c)}
                    for c in sorted(ev.class_total)
                },
            }
            for cid, ev in sorted(report.clients.items())
        },
    }
    if metrics is not None:
        doc["forgetting_metrics"] = {
            "forget_efficacy": metrics.forget_efficacy,
            "collateral_retained": metrics.collateral_retained,
            "collateral_nonrequesting_forget": metrics.collateral_nonrequesting_forget,
        }
    return json.dumps(doc, sort_keys=True, indent=1)


def report_from_json(text: str) -> tuple[EvaluationReport, ForgettingMetrics | None]:
    doc = json.loads(text)
    clients = {}
    for cid_s, entry in doc["clients"].items():
        correct = {int(c): v["correct"] for c, v in entry["classes"].items()}
        total = {int(c): v["total"] for c, v in entry["classes"].items()}
        clients[int(cid_s)] = ClientEvaluation(correct, total)
    report = EvaluationReport(clients, dict(doc.get("metadata", {})))
    metrics = None
    if "forgetting_metrics" in doc:
        m = doc["forgetting_metrics"]
        metrics = ForgettingMetrics(m["forget_efficacy"], m["collateral_retained"],
                                    m["collateral_nonrequesting_forget"])
    return report, metrics


def _pct(value: float) -> str:
    return f"{value * 100.0:.2f}"


def report_to_csv(report: EvaluationReport, strategy: str) -> str:
    """One row per (client, class); percentage with two decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client", "class", strategy])
    for cid, ev in sorted(report.clients.items()):
        for c in sorted(ev.class_total):
            writer.writerow([cid, c, _pct(ev.accuracy(c))])
    return buf.getvalue()


def combined_csv(reports: dict[str, EvaluationReport]) -> str:
    """Multi-strategy table keyed on identical (client, class) coverage."""
    names = list(reports)
    first = reports[names[0]]
    rows = [(cid, c) for cid, ev in sorted(first.clients.items())
            for c in sorted(ev.class_total)]
    for name in names[1:]:
        other = reports[name]
        other_rows = [(cid, c) for cid, ev in sorted(other.clients.items())
                      for c in sorted(ev.class_total)]
        if other_rows != rows:
            raise EvalError(f"report {name!r} covers different clients/classes")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["client", "class"] + names)
    for cid, c in rows:
        writer.writerow([cid, c] + [_pct(reports[n].clients[cid].accuracy(c))
                                    for n in names])
    return buf.getvalue()


def plot_data_csv(global_accuracies: dict[str, tuple[float, float]]) -> str:
    """Per-strategy (before, after) global accuracy pairs for plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy", "global_before", "global_after"])
    for name in sorted(global_accuracies):
        b, a = global_accuracies[name]
        writer.writerow([name, _pct(b), _pct(a)])
    return buf.getvalue()


def emit_report(report: EvaluationReport, metrics: ForgettingMetrics | None,
                path, fmt: str = "json") -> None:
    """Write a report to disk as json (exact) or csv (table layout)."""
    if fmt == "json":
        text = report_to_json(report, metrics)
    elif fmt == "csv":
        strategy = str(report.metadata.get("strategy", "accuracy"))
        text = report_to_csv(report, strategy)
    else:
        raise EvalError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
