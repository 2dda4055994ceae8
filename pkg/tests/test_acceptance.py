"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or
``python tests/test_acceptance.py``).
"""

import itertools
import json
import math
import sys
import time

import numpy as np
import pytest

from kstepctr.cli import run_experiment
from kstepctr.config import ExperimentConfig
from kstepctr.ledger import Category, kstep_ratio, simulate_schedule, two_phase_ratio
from kstepctr.optimizer import (
    AdamHyper,
    NonconvexOracle,
    QuadraticOracle,
    WorkerState,
    adagrad_sparse_update,
    check_gradient,
    convergence_metric,
    fit_a3_exponent,
    kstep_step,
    run_kstep_adam,
)
from kstepctr.store import TierConfig, TieredStore
from kstepctr.topology import (
    LinkType,
    build_topology,
    example_topology,
    eight_gpu_document,
    naive_route,
    plan_all_pairs,
    plan_route,
    transfer_time,
)
from kstepctr.trainer import (
    Instance,
    Minibatch,
    ModelConfig,
    TrainerConfig,
    TrainingContext,
    backward,
    batched,
    bce_loss,
    compute_auc,
    forward,
    generate_synthetic_ctr,
    predict_proba,
)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


# 1 -------------------------------------------------------------------------

def test_criterion_1_degeneracy(verdict):
    t0 = time.perf_counter()
    c = np.linspace(-2.0, 3.0, 10)
    h = AdamHyper()
    traj = run_kstep_adam(QuadraticOracle([c]), h, 1, 1000, np.zeros(10))
    x = np.zeros(10)
    m = np.zeros(10)
    v = np.full(10, h.epsilon)
    worst = 0.0
    for t in range(1000):
        worst = max(worst, float(np.abs(traj.x_bar[t] - x).max()))
        g = x - c
        m = h.beta1 * m + (1 - h.beta1) * g
        v = h.beta2 * v + (1 - h.beta2) * g * g
        x = x - h.alpha * m / np.sqrt(v)
    worst = max(worst, float(np.abs(traj.final_x - x).max()))
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and elapsed < 1.0, f"max |dx| = {worst:.2e}, {elapsed:.2f}s")


# 2 -------------------------------------------------------------------------

def test_criterion_2_replica_invariance(verdict):
    orc = NonconvexOracle(dim=10, n_parts=1, noise_std=0.5, seed=1)
    x0 = np.full(10, 2.0)
    ok, details = True, []
    for k in (1, 5, 16):
        h = AdamHyper(k=k)
        one = run_kstep_adam(orc, h, 1, 1000, x0, seed=3, same_stream=True)
        eight = run_kstep_adam(orc, h, 8, 1000, x0, seed=3, same_stream=True)
        same = np.array_equal(one.x_bar, eight.x_bar) and np.array_equal(one.final_x, eight.final_x)
        ok &= same
        details.append(f"k={k}:{'identical' if same else 'differs'}")
    verdict(2, ok, ", ".join(details))


# 3 -------------------------------------------------------------------------

def scalar_replay():
    alpha, b1, b2, eps = 0.1, 0.9, 0.999, 0.01
    c = (2.0, -1.0)
    x, m, v, vb = [1.0, 1.0], [0.0, 0.0], [eps, eps], eps
    rows = []
    for t in range(1, 5):
        g = [x[0] - c[0], x[1] - c[1]]
        m = [b1 * m[i] + (1 - b1) * g[i] for i in range(2)]
        v = [b2 * v[i] + (1 - b2) * g[i] ** 2 for i in range(2)]
        if t % 2 == 0:
            vb = (v[0] + v[1]) / 2
            xn = ((x[0] - alpha * m[0] / math.sqrt(vb)) + (x[1] - alpha * m[1] / math.sqrt(vb))) / 2
            x, v = [xn, xn], [vb, vb]
        else:
            x = [x[i] - alpha * m[i] / math.sqrt(vb) for i in range(2)]
        rows.append((x, m, v, vb))
    return rows


def test_criterion_3_hand_trace(verdict):
    h = AdamHyper(alpha=0.1, beta1=0.9, beta2=0.999, epsilon=0.01, k=2)
    c = (2.0, -1.0)
    states = [WorkerState.initial([1.0], h) for _ in range(2)]
    worst, flags = 0.0, []
    for x, m, v, vb in scalar_replay():
        states, merged = kstep_step(states, [s.x - c[i] for i, s in enumerate(states)], h)
        flags.append(merged)
        for i in range(2):
            worst = max(worst, abs(states[i].x[0] - x[i]), abs(states[i].m[0] - m[i]),
                        abs(states[i].v[0] - v[i]), abs(states[i].v_bar[0] - vb))
    ok = worst <= 1e-12 and flags == [False, True, False, True]
    verdict(3, ok, f"max state error {worst:.2e}, merges at {[i + 1 for i, f in enumerate(flags) if f]}")


# 4 -------------------------------------------------------------------------

def test_criterion_4_convergence_parity(verdict):
    t0 = time.perf_counter()
    orc = NonconvexOracle(dim=20, n_parts=4, spread=1.0, noise_std=0.5, seed=0)
    x0 = np.full(20, 3.0)
    final, gammas = {}, {}
    for k in (1, 8, 32):
        traj = run_kstep_adam(orc, AdamHyper(alpha=0.01, k=k), 4, 5000, x0, seed=1)
        _, running = convergence_metric(traj)
        final[k] = float(running[-1])
        gammas[k] = fit_a3_exponent(traj.a3, 20)[1]
    elapsed = time.perf_counter() - t0
    ok = (all(final[k] <= 2 * final[1] for k in (8, 32)) and all(g <= 0.6 for g in gammas.values())
          and elapsed < 120)
    detail = ", ".join(f"k={k}: metric {final[k]:.4f} gamma {gammas[k]:.3f}" for k in final)
    verdict(4, ok, f"{detail}; {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------

def test_criterion_5_communication_arithmetic(verdict):
    T, N, model = 100, 4, 500
    D = 2 * N * model                   # dense bytes per step at k=1
    S = 4 * D
    base = simulate_schedule(T, 1, N, model, S)
    ok, parts = True, []
    for k in (10, 20, 50, 100):
        led = simulate_schedule(T, k, N, model, S)
        events = led.totals(Category.DENSE_MERGE).count
        dense = kstep_ratio(led, base, "dense")
        ok &= events == (T // k) * N and dense == (T // k) / T
        parts.append(f"k={k}: events {events} dense {dense}")
    total10 = kstep_ratio(simulate_schedule(T, 10, N, model, S), base, "total")
    ok &= abs(total10 - 0.82) <= 1e-12
    T2 = 1000
    base2 = simulate_schedule(T2, 1, N, model, S)
    sweep = [kstep_ratio(simulate_schedule(T2, k, N, model, S), base2, "total") for k in (10, 20, 50, 100, 200)]
    ok &= all(a > b for a, b in zip(sweep, sweep[1:]))

    # the trainer's own ledger obeys the same count over a short run
    cfg = TrainerConfig(n_workers=4, adam=AdamHyper(k=3), model=ModelConfig(vocab_size=300),
                        minibatch_size=32)
    ctx = TrainingContext(cfg)
    from kstepctr.trainer import train_batch
    batches = list(generate_synthetic_ctr(0, 1024, 300, 5, 256))
    for b in batches:
        train_batch(ctx, b)
    BM = ctx.dense_steps
    ok &= ctx.ledger.totals(Category.DENSE_MERGE).count == (BM // 3) * 4
    ctx.close()
    verdict(5, ok, f"{'; '.join(parts)}; total(k=10) {total10:.15f}; "
                   f"sweep {[round(r, 4) for r in sweep]}; trainer merges {(BM // 3) * 4}")


# 6 -------------------------------------------------------------------------

def test_criterion_6_two_phase_routing(verdict):
    g = example_topology()
    plan = plan_all_pairs(g)
    routes_ok = len(plan) == 64 and all(
        len(r.links) <= 2 and all(l.link_type is LinkType.NVLINK for l in r.links)
        for r in (plan.route(a, b) for a, b in itertools.product(g.accelerators, repeat=2)))

    g10 = build_topology(eight_gpu_document(nvlink=10.0, pcie=1.0, qpi=1.0))
    W = np.full((8, 8), 1 << 20, dtype=np.int64)
    np.fill_diagonal(W, 0)
    ratio = two_phase_ratio(g10, W)
    planned = naive = 0.0
    dominance = True
    for a, b in itertools.permutations(g10.accelerators, 2):
        p = sum((1 << 20) / l.bandwidth for l in plan_route(g10, a, b).links)
        q = sum((1 << 20) / l.bandwidth for l in naive_route(g10, a, b).links)
        dominance &= p < q
        planned += p
        naive += q
    oracle = planned / naive
    ok = routes_ok and dominance and abs(ratio - oracle) <= 1e-12 and ratio <= 0.5
    verdict(6, ok, f"64 NVLink routes <=2 links: {routes_ok}; ratio {ratio:.6f} (oracle {oracle:.6f})")


# 7 -------------------------------------------------------------------------

def test_criterion_7_store_oracle(verdict, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    dim, lr = 4, 0.2
    store = TieredStore(TierConfig(64, tmp_path), dim)
    flat = {}
    working: list[int] = []
    mismatches = 0
    for _ in range(100_000):
        r = rng.random()
        if r < 0.3 or not working:
            keys = rng.integers(0, 1000, size=rng.integers(1, 17)).tolist()
            got = store.pull_batch(keys)
            working = sorted(set(keys))
            for k in working:
                w, a = flat.setdefault(k, (np.zeros(dim), np.full(dim, 1e-6)))
                mismatches += not (np.array_equal(got[k].weights, w) and np.array_equal(got[k].adagrad_acc, a))
        elif r < 0.6:
            sel = rng.choice(working, size=rng.integers(1, len(working) + 1), replace=False).tolist()
            upd = {k: rng.standard_normal(dim) for k in sel}
            store.push_updates(upd, lr)
            for k in sorted(upd):
                flat[k] = adagrad_sparse_update(*flat[k], upd[k], lr)
        elif r < 0.8:
            store.evict()
            mismatches += len(store) > 64
            working = []
        else:
            k = int(rng.integers(0, 1000))
            e = store.get(k)
            if k in flat:
                mismatches += not (np.array_equal(e.weights, flat[k][0]) and np.array_equal(e.adagrad_acc, flat[k][1]))
            else:
                mismatches += e is not None
    store.evict()
    cold_checked = 0
    for k in sorted(store.cold_keys - set(store.cache)):
        e = store.get(k)
        cold_checked += 1
        mismatches += not (np.array_equal(e.weights, flat[k][0]) and np.array_equal(e.adagrad_acc, flat[k][1]))
    store.close()
    elapsed = time.perf_counter() - t0
    verdict(7, mismatches == 0 and elapsed < 30,
            f"{mismatches} mismatches over 1e5 ops, {cold_checked} cold entries re-read exactly, {elapsed:.1f}s")


# 8 -------------------------------------------------------------------------

def test_criterion_8_gradient_check(verdict):
    rng = np.random.default_rng(8)
    errors = []
    for _ in range(5):
        cfg = ModelConfig(vocab_size=100, embedding_dim=int(rng.integers(2, 6)),
                          hidden=tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(1, 3))),
                          activation=str(rng.choice(["relu", "tanh", "sigmoid"])),
                          pooling=str(rng.choice(["sum", "mean"])))
        ins = [Instance(tuple(int(x) for x in rng.choice(100, size=rng.integers(1, 8), replace=False)),
                        int(rng.integers(0, 2))) for _ in range(16)]
        mb = Minibatch.build(ins, cfg.pooling)
        theta = rng.uniform(-0.5, 0.5, cfg.n_dense)
        emb = rng.standard_normal((mb.keys.shape[0], cfg.embedding_dim))
        nd = cfg.n_dense

        def loss(z):
            _, cache = forward(z[:nd], z[nd:].reshape(emb.shape), mb, cfg)
            return bce_loss(cache.logits, mb.labels)

        def grad(z):
            th, e = z[:nd], z[nd:].reshape(emb.shape)
            _, cache = forward(th, e, mb, cfg)
            gd, ge = backward(th, e, mb, cache, cfg)
            return np.concatenate([gd, ge.ravel()])

        errors.append(check_gradient(loss, grad, np.concatenate([theta, emb.ravel()])))
    verdict(8, max(errors) <= 1e-4, f"max relative error {max(errors):.2e} over 5 configs")


# 9 -------------------------------------------------------------------------

def pair_count_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def test_criterion_9_auc(verdict):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 1001))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding forces ties
        worst = max(worst, abs(compute_auc(scores, labels) - pair_count_auc(scores, labels)))

    pool = [i for b in generate_synthetic_ctr(9, 30_000, 10_000, 10) for i in b.instances]
    pos = [i for i in pool if i.label == 1][:5000]
    neg = [i for i in pool if i.label == 0][:5000]
    mixed = [x for pair in zip(pos, neg) for x in pair]
    ctx = TrainingContext(TrainerConfig(n_workers=4))
    aucs = [compute_auc(predict_proba(ctx, b.instances), b.labels) for b in batched(mixed, 1024)]
    ctx.close()
    ok = worst <= 1e-12 and len(mixed) == 10_000 and all(0.45 <= a <= 0.55 for a in aucs)
    verdict(9, ok, f"max |rank-sum - pairs| {worst:.1e}; untrained per-batch AUC in "
                   f"[{min(aucs):.3f}, {max(aucs):.3f}] over {len(aucs)} batches")


# 10 ------------------------------------------------------------------------

def test_criterion_10_online_auc_parity(verdict, tmp_path):
    t0 = time.perf_counter()
    base = {"n_workers": 4, "data": {"n_instances": 100_000}}
    aucs = {}
    for k in (1, 16):
        cfg = ExperimentConfig.from_document({**base, "k": k, "output_dir": str(tmp_path / f"k{k}")})
        aucs[k] = run_experiment(cfg, cfg.output_dir)["result"]["cumulative_auc"]
    rerun = ExperimentConfig.from_document({**base, "k": 16, "output_dir": str(tmp_path / "again")})
    run_experiment(rerun, rerun.output_dir)
    identical = ((tmp_path / "k16" / "metrics.jsonl").read_bytes()
                 == (tmp_path / "again" / "metrics.jsonl").read_bytes())
    elapsed = time.perf_counter() - t0
    diff = abs(aucs[16] - aucs[1])
    ok = min(aucs.values()) >= 0.70 and diff <= 0.005 and identical and elapsed < 300
    verdict(10, ok, f"AUC k=1 {aucs[1]:.4f}, k=16 {aucs[16]:.4f}, |diff| {diff:.5f}, "
                    f"rerun identical {identical}, {elapsed:.0f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
