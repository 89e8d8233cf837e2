"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
summary lines and timings.
"""
import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from fusim import evalkit, experiment, fedcccu, fedsim, nncore as nn, unlearn_routes
from fusim.config import load_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _report(tag, elapsed, budget, detail):
    print(f"\n[{tag}] PASS ({elapsed:.1f}s < {budget:.0f}s budget): {detail}")


# ---------------------------------------------------------------------------
# Shared trained federations (module scope: train once, reuse across criteria)


@pytest.fixture(scope="module")
def digits3(tmp_path_factory):
    cfg = load_config(CONFIG_DIR / "digits3.ini")
    out = str(tmp_path_factory.mktemp("digits3"))
    task, trained, summary = experiment.ensure_train(cfg, out)
    before = evalkit.build_report(task.spec, trained, task.client_test_sets)
    return cfg, task, trained, summary, before


@pytest.fixture(scope="module")
def pair2(tmp_path_factory):
    cfg = load_config(CONFIG_DIR / "pair2.ini")
    out = str(tmp_path_factory.mktemp("pair2"))
    task, trained, summary = experiment.ensure_train(cfg, out)
    before = evalkit.build_report(task.spec, trained, task.client_test_sets)
    return cfg, task, trained, summary, before


def run_route(cfg, task, trained, summary, route, **overrides):
    c = dataclasses.replace(
        cfg, unlearn=dataclasses.replace(cfg.unlearn, route=route, **overrides))
    params, logs, extras = experiment.run_route(
        c, task, trained, start_round=summary["rounds_run"])
    after = evalkit.build_report(task.spec, params, task.client_test_sets)
    return after, extras


def forget_drop(before, after, cid, forget=0):
    return 100.0 * (before.per_class(cid)[forget] - after.per_class(cid)[forget])


def mean_retained_drop(before, after, forget=0):
    drops = []
    for cid in sorted(before.clients):
        b, a = before.per_class(cid), after.per_class(cid)
        drops.append(100.0 * np.mean([b[c] - a[c] for c in b if c != forget]))
    return float(np.mean(drops))


# ---------------------------------------------------------------------------
# Criterion 1: numeric core


def random_tiny_model(rng):
    widths = [int(rng.integers(2, 6)) for _ in range(3)]
    layers = (nn.dense(widths[0], widths[1]), nn.relu(),
              nn.dense(widths[1], widths[2]), nn.softmax())
    spec = nn.ModelSpec(layers, widths[2], (widths[0],))
    params = nn.init_params(spec, int(rng.integers(0, 2**31)))
    params = {k: v + rng.normal(0, 0.6, v.shape) for k, v in params.items()}
    return spec, params


def test_criterion_1_numeric_core():
    start = time.monotonic()
    rng = np.random.default_rng(1001)
    models = 0
    while models < 100:
        spec, params = random_tiny_model(rng)
        batch = [(rng.normal(0, 1, spec.input_shape), int(rng.integers(0, spec.class_count)))
                 for _ in range(2)]
        probs, _ = nn.forward(spec, params, batch[0][0])
        assert abs(probs.sum() - 1.0) < 1e-9
        _, grads = nn.loss_and_gradient(spec, params, batch)
        step = 1e-5
        for name, arr in params.items():
            fd = np.zeros_like(arr)
            flat, fdflat = arr.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp, _ = nn.loss_and_gradient(spec, params, batch)
                flat[i] = orig - step
                lm, _ = nn.loss_and_gradient(spec, params, batch)
                flat[i] = orig
                fdflat[i] = (lp - lm) / (2 * step)
            err = np.abs(grads[name] - fd) / np.maximum(np.abs(fd), 1e-6)
            assert np.all(err < 1e-4), (models, name)
        models += 1

    # unit-activation gradients against finite differences (subset of models)
    checked = 0
    while checked < 20:
        spec, params = random_tiny_model(rng)
        x = rng.normal(0, 1, spec.input_shape)
        acts = nn.batch_unit_activations(spec, params, x[None])[0][0]
        live = [k for k in range(acts.size) if acts[k] > 0.05]
        if not live:
            continue
        unit = nn.UnitId(0, live[0])
        beta = acts[live[0]]
        s, delta = 0.5, 1e-6
        pp = nn.forward_with_scaled_unit(spec, params, x, unit, s + delta)[0]
        pm = nn.forward_with_scaled_unit(spec, params, x, unit, s - delta)[0]
        fd = (pp - pm) / (2 * delta * beta)
        g = nn.gradient_wrt_unit(spec, params, x, 0, unit, s)
        assert abs(g - fd) / max(abs(fd), 1e-6) < 1e-4
        checked += 1

    # sgd and aggregation against independent oracles
    params = {"w": rng.normal(0, 1, (7, 3)), "b": rng.normal(0, 1, (3,))}
    grad = {"w": rng.normal(0, 1, (7, 3)), "b": rng.normal(0, 1, (3,))}
    stepped = nn.sgd_step(params, grad, 0.31)
    for k in params:
        assert np.max(np.abs(stepped[k] - (params[k] - 0.31 * grad[k]))) < 1e-12
    sets = [({k: rng.normal(0, 1, v.shape) for k, v in params.items()},
             float(rng.integers(1, 20))) for _ in range(5)]
    agg = fedsim.aggregate(sets)
    total = sum(w for _, w in sets)
    for k in params:
        oracle = sum((w / total) * p[k] for p, w in sets)
        assert np.max(np.abs(agg[k] - oracle)) < 1e-12

    elapsed = time.monotonic() - start
    assert elapsed < 60
    _report("criterion 1", elapsed, 60,
            f"{models} models FD-checked at 1e-4; softmax 1e-9; sgd/aggregate 1e-12")


# ---------------------------------------------------------------------------
# Criterion 2: attribution suite


def attribution_battery():
    cases = []
    spec = nn.ModelSpec(
        (nn.dense(2, 2), nn.relu(), nn.dense(2, 2), nn.softmax()), 2, (2,))
    params = {
        "layer0.weight": np.array([[0.8, -0.3], [0.5, 0.9]]),
        "layer0.bias": np.array([0.2, 0.1]),
        "layer1.weight": np.array([[1.2, -0.7], [-0.4, 1.0]]),
        "layer1.bias": np.array([0.05, -0.05]),
    }
    cases.append((spec, params, np.array([0.9, 0.6]), nn.UnitId(0, 0), 0))
    cases.append((spec, params, np.array([0.9, 0.6]), nn.UnitId(0, 1), 1))
    spec_b = nn.ModelSpec(
        (nn.dense(3, 4), nn.relu(), nn.dense(4, 3), nn.softmax()), 3, (3,))
    rng = np.random.default_rng(90)
    params_b = {k: v + rng.normal(0, 0.5, v.shape)
                for k, v in nn.init_params(spec_b, 90).items()}
    x = np.array([0.8, -0.1, 0.4])
    acts = nn.batch_unit_activations(spec_b, params_b, x[None])[0][0]
    for k in range(4):
        if acts[k] > 0.1 and abs(fc_att(spec_b, params_b, x, 0, nn.UnitId(0, k), 200)) > 0.01:
            cases.append((spec_b, params_b, x, nn.UnitId(0, k), 0))
    assert len(cases) >= 3
    return cases


def fc_att(spec, params, x, target, unit, m):
    return fedcccu.attribute_unit(spec, params, x, target, unit, m)


def test_criterion_2_attribution_suite():
    start = time.monotonic()
    # zero activation -> exactly zero
    spec = nn.ModelSpec((nn.dense(2, 2), nn.relu(), nn.dense(2, 2), nn.softmax()),
                        2, (2,))
    params = nn.init_params(spec, 5)
    params["layer0.bias"] = np.array([-40.0, -40.0])
    assert fc_att(spec, params, np.ones(2), 0, nn.UnitId(0, 0), 20) == 0.0

    for case in attribution_battery():
        spec, params, x, unit, target = case
        beta = float(nn.forward(spec, params, x)[1].unit_activations[unit.layer][unit.unit])
        g_full = nn.gradient_wrt_unit(spec, params, x, target, unit, 1.0)
        a1 = fc_att(spec, params, x, target, unit, 1)
        assert a1 == pytest.approx(beta * g_full, rel=1e-12)
        a2000 = fc_att(spec, params, x, target, unit, 2000)
        a20 = fc_att(spec, params, x, target, unit, 20)
        assert abs(a20 - a2000) / abs(a2000) < 0.05
        errs = [abs(fc_att(spec, params, x, target, unit, m) - a2000)
                for m in (5, 20, 100)]
        assert errs[0] >= errs[1] >= errs[2]

    elapsed = time.monotonic() - start
    assert elapsed < 120
    _report("criterion 2", elapsed, 120,
            "beta=0 exact; m=1 closed form; m=20 within 5% of m=2000; refinement monotone")


# ---------------------------------------------------------------------------
# Criterion 3: protocol suite


def test_criterion_3_protocol_suite():
    start = time.monotonic()
    cfg = load_config(CONFIG_DIR / "digits3.ini")

    def one_run():
        task = experiment.build_task(cfg)
        clients = task.build_clients()
        result = fedsim.run_training(task.spec, clients, task.val_x, task.val_y,
                                     experiment._fed_config(cfg))
        return task, clients, result

    task_a, clients_a, run_a = one_run()
    task_b, clients_b, run_b = one_run()
    assert run_a.logs == run_b.logs
    assert nn.params_equal(run_a.params, run_b.params)

    # fairness: zero gradient computations by non-requesting clients
    request = fedsim.UnlearnRequest((0,), 0)
    state0 = clients_a[0]
    state0.replace_shard(unlearn_routes.delete_retrain_prepare(state0.examples, 0))
    pre = {c.client_id: c.local_step_counter for c in clients_a}
    fedsim.fair_unlearn_rounds(run_a.params, task_a.spec, clients_a, request,
                               task_a.val_x, task_a.val_y,
                               experiment._fed_config(cfg),
                               start_round=len(run_a.logs))
    nonreq_steps = sum(c.local_step_counter - pre[c.client_id]
                       for c in clients_a if c.client_id != 0)
    assert nonreq_steps == 0
    assert clients_a[0].local_step_counter > pre[0]

    # aggregate identity and permutation invariants
    spec = task_a.spec
    p = nn.init_params(spec, 3)
    assert nn.params_equal(fedsim.aggregate([(p, 2), (p, 5), (p, 1)]), p)
    sets = [(nn.init_params(spec, i), i + 1) for i in range(4)]
    shuffled = [sets[3], sets[1], sets[0], sets[2]]
    assert nn.params_equal(fedsim.aggregate(sets),
                           fedsim.aggregate(sorted(shuffled, key=lambda t: t[1])))
    weights = [c.sample_count for c in clients_a]
    assert abs(sum(w / sum(weights) for w in weights) - 1.0) < 1e-15

    elapsed = time.monotonic() - start
    assert elapsed < 300
    _report("criterion 3", elapsed, 300,
            "bit-identical runs; non-requesting gradient steps = 0; aggregate invariants")


# ---------------------------------------------------------------------------
# Criterion 4: benchmark training


def test_criterion_4_benchmark_training(digits3):
    start = time.monotonic()
    cfg, task, trained, summary, before = digits3
    assert task.plan.client_count == 9
    assert len({c.domain_id for c in task.plan.clients}) == 3
    t0 = summary["convergence_round"]
    assert t0 is not None and t0 <= 50
    val_acc = 1.0 - summary["final_val_error"]
    assert val_acc >= 0.85
    elapsed = time.monotonic() - start
    assert elapsed < 600
    _report("criterion 4", elapsed, 600,
            f"9 clients / 3 domains: T0={t0}, val accuracy {val_acc:.3f} >= 0.85")


# ---------------------------------------------------------------------------
# Criterion 5: delete-retrain stays ineffective under the fair protocol


def test_criterion_5_delete_retrain_pattern(digits3):
    start = time.monotonic()
    cfg, task, trained, summary, before = digits3
    after, _ = run_route(cfg, task, trained, summary, "delete")
    same_domain = [cid for cid, c in enumerate(task.plan.clients)
                   if c.domain_id == task.plan.clients[0].domain_id and cid != 0]
    assert same_domain
    drops = {cid: forget_drop(before, after, cid) for cid in same_domain}
    assert all(d <= 10.0 for d in drops.values()), drops
    elapsed = time.monotonic() - start
    _report("criterion 5", elapsed, 600,
            f"same-domain non-requesting forget-class drops {drops} <= 10 points")


# ---------------------------------------------------------------------------
# Criterion 6: naive zeroing over-forgets everywhere


def test_criterion_6_naive_zeroing_over_forgetting(digits3):
    start = time.monotonic()
    cfg, task, trained, summary, before = digits3
    after_zero, _ = run_route(cfg, task, trained, summary, "zeroing")
    forget_acc = {cid: after_zero.per_class(cid)[0] for cid in sorted(after_zero.clients)}
    assert all(a <= 0.05 for a in forget_acc.values()), forget_acc
    after_cccu, _ = run_route(cfg, task, trained, summary, "fedcccu")
    drop_zero = before.global_accuracy - after_zero.global_accuracy
    drop_cccu = before.global_accuracy - after_cccu.global_accuracy
    assert drop_zero > drop_cccu
    elapsed = time.monotonic() - start
    _report("criterion 6", elapsed, 600,
            f"forget-class <= 5% at all 9 clients; global drop {100*drop_zero:.1f} "
            f"> fedcccu {100*drop_cccu:.1f} points")


# ---------------------------------------------------------------------------
# Criterion 7: FedCCCU forgets at the requester with bounded collateral


def test_criterion_7_fedcccu_pattern(pair2):
    start = time.monotonic()
    cfg, task, trained, summary, before = pair2
    assert before.per_class(0)[0] >= 0.9  # requester actually knows the class

    after_cccu, extras = run_route(cfg, task, trained, summary, "fedcccu")
    after_delete, _ = run_route(cfg, task, trained, summary, "delete")
    after_zero, _ = run_route(cfg, task, trained, summary, "zeroing")

    cccu_drop = forget_drop(before, after_cccu, 0)
    delete_drop = forget_drop(before, after_delete, 0)
    cccu_retained = mean_retained_drop(before, after_cccu)
    zero_retained = mean_retained_drop(before, after_zero)

    assert cccu_drop >= 50.0
    assert cccu_retained <= 10.0
    assert cccu_drop > delete_drop
    assert cccu_retained < zero_retained

    elapsed = time.monotonic() - start
    assert elapsed < 900
    _report("criterion 7", elapsed, 900,
            f"requester forget drop {cccu_drop:.1f} >= 50 (delete {delete_drop:.1f}); "
            f"retained drop {cccu_retained:.2f} <= 10 (zeroing {zero_retained:.2f})")


# ---------------------------------------------------------------------------
# Criterion 8: dominance unit behavior


def test_criterion_8_dominance_units():
    start = time.monotonic()
    u = nn.UnitId

    def rec(layer, unit, score):
        return fedcccu.SensitivityRecord(u(layer, unit), 0, score)

    forget = fedcccu.SensitivityReport(0, {0: (rec(0, 1, 0.8), rec(0, 2, 0.5))})
    other = fedcccu.SensitivityReport(1, {0: (rec(0, 2, 0.4),)})
    entries = fedcccu.compute_dominance([forget, other], 0, 0)
    by_unit = {e.unit.unit: e for e in entries}
    assert by_unit[1].s_max_other == 0.0 and by_unit[1].ratio == 0.0
    assert by_unit[2].ratio == pytest.approx(0.8)

    # global positive rescaling leaves the selection identical
    scale = 13.0
    scaled_entries = fedcccu.compute_dominance([
        fedcccu.SensitivityReport(0, {0: (rec(0, 1, 0.8 * scale), rec(0, 2, 0.5 * scale))}),
        fedcccu.SensitivityReport(1, {0: (rec(0, 2, 0.4 * scale),)}),
    ], 0, 0)
    assert fedcccu.rank_select(entries, 1).units == \
        fedcccu.rank_select(scaled_entries, 1).units

    # deterministic tie-breaking: equal ratios order by s_forget then address
    ties = [fedcccu.DominanceEntry(u(0, 5), 0.4, 0.0, 0.0),
            fedcccu.DominanceEntry(u(0, 3), 0.9, 0.0, 0.0),
            fedcccu.DominanceEntry(u(0, 4), 0.9, 0.0, 0.0)]
    sel = fedcccu.rank_select(ties, 3)
    assert [x.unit for x in sel.units] == [3, 4, 5]
    sel_again = fedcccu.rank_select(list(reversed(ties)), 3)
    assert sel.units == sel_again.units

    elapsed = time.monotonic() - start
    _report("criterion 8", elapsed, 60,
            "absent units R=0; selection scale-invariant; ties deterministic")
