"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Criteria 8-11 share one battery: five full runs per method over seeds 1-5
at the shipped desk defaults, plus paired base-vs-adapted sample scoring.
Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import json
import math
import time

import numpy as np
import pytest

from synreplay import backend, cli, continual, selection, vlm
from synreplay import numcore as nc
from synreplay.config import ExperimentConfig
from synreplay.generator import GeneratorModel, NoiseSchedule, sample_cfg
from synreplay.lora import LoraAdapter, apply_adapter, finetune_adapter
from synreplay.numcore.rng import RngStream, derive_key

SEEDS = (1, 2, 3, 4, 5)


def _verdict(num, ok, detail):
    line = f"criterion {num:02d} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    assert ok, line


# -------------------------------------------------------------- criteria 1-7

@pytest.mark.acceptance
def test_criterion_01_gradient_correctness():
    t0 = time.time()
    rng = RngStream(101)
    worst = 0.0
    for net in range(25):
        d_in, hidden, d_out = rng.randint(4) + 2, rng.randint(5) + 2, rng.randint(3) + 2
        w1 = nc.Tensor(rng.normal((d_in, hidden)) * 0.6, requires_grad=True)
        b1 = nc.Tensor(rng.normal((hidden,)) * 0.2, requires_grad=True)
        w2 = nc.Tensor(rng.normal((hidden, d_out)) * 0.6, requires_grad=True)
        x = nc.Tensor(rng.normal((3, d_in)))
        params = [w1, b1, w2]

        def loss_fn():
            h = nc.tanh(nc.matmul(x, w1) + b1)
            p = nc.softmax(nc.matmul(h, w2))
            return nc.tmean(nc.mul(p, p)) + nc.tmean(nc.square(h))

        loss = loss_fn()
        for p in params:
            p.grad = None
        nc.backward(loss)
        h = 1e-4
        for p in params:
            flat = p.values.reshape(-1)
            gflat = p.grad.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                with nc.no_grad():
                    up = loss_fn().item()
                flat[i] = old - h
                with nc.no_grad():
                    down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * h)
                rel = abs(gflat[i] - fd) / max(abs(fd), 1e-3)
                worst = max(worst, rel)
    elapsed = time.time() - t0
    _verdict(1, worst < 1e-4 and elapsed < 10.0,
             f"max rel err {worst:.2e} over 25 nets in {elapsed:.1f}s")


@pytest.mark.acceptance
def test_criterion_02_probability_contract():
    model = vlm.DualEncoder(pixels=16, embed_dim=8, hidden=12, token_dim=8,
                            vocab_cap=64, init_seed=7)
    classes = ["ca", "cb", "cc", "cd"]
    rng = RngStream(202)
    ok_sum, ok_argmax = True, True
    for _ in range(1000):
        x = rng.uniform((1, 16))
        args = []
        for tau in (0.1, 1.0, 10.0):
            model.store["log_tau"].values[...] = math.log(tau)
            probs = vlm.class_probabilities(model, x, classes).values
            ok_sum &= bool(abs(probs.sum() - 1.0) <= 1e-9)
            args.append(int(np.argmax(probs)))
        ok_argmax &= (args[0] == args[1] == args[2])
    _verdict(2, ok_sum and ok_argmax,
             "rows sum to 1 +/- 1e-9 and argmax is tau-invariant on 1000 inputs")


@pytest.mark.acceptance
def test_criterion_03_lora_noop_identity():
    gen = GeneratorModel(class_names=["ca", "cb"], pixels=16, width=24, time_dim=8,
                         cond_dim=8, schedule=NoiseSchedule(steps=10, beta_start=0.01,
                                                            beta_end=0.3), init_seed=5)
    gen.freeze()
    adapter = LoraAdapter(gen, rank=4, init_rng=RngStream(77))
    view = apply_adapter(gen, adapter)
    identical = all(
        sample_cfg(gen, "cb", 7.5, seed=s).sample.tobytes() ==
        sample_cfg(view, "cb", 7.5, seed=s).sample.tobytes()
        for s in range(16))
    fp_before = gen.fingerprint()
    finetune_adapter(gen, RngStream(3).uniform((6, 16)), np.array([0, 0, 0, 1, 1, 1]),
                     rank=4, epochs=40, rng=RngStream(4), lr=1e-3)
    _verdict(3, identical and gen.fingerprint() == fp_before,
             "zero-init adapter bit-identical over 16 seeds; base hash unchanged by finetune")


@pytest.mark.acceptance
def test_criterion_04_cfg_identities():
    ok = True
    for model_seed in (1, 2, 3):
        gen = GeneratorModel(class_names=["ca", "cb", "cc"], pixels=12, width=16,
                             time_dim=6, cond_dim=6,
                             schedule=NoiseSchedule(steps=8, beta_start=0.02, beta_end=0.3),
                             init_seed=model_seed)
        row = gen.class_row("cb")
        weights = gen.sampling_weights()
        cond = gen.cond_values()

        def oracle(row_idx, seed):
            sched = gen.schedule
            rng = RngStream(seed)
            x = rng.normal((gen.pixels,))
            states = []
            for t in range(sched.steps - 1, -1, -1):
                inp = np.concatenate([x, gen.time_table[t], cond[row_idx]])[None, :]
                x0 = backend.mlp3_tanh(np.ascontiguousarray(inp), *weights)[0]
                sig, noi = math.sqrt(sched.alpha_bar[t]), math.sqrt(1 - sched.alpha_bar[t])
                eps = (x - sig * np.clip(x0, -1, 1)) / noi
                x = (x - sched.betas[t] / noi * eps) / math.sqrt(sched.alphas[t])
                if t > 0:
                    x = x + math.sqrt(sched.posterior_var[t]) * rng.normal((gen.pixels,))
                states.append((eps, x.copy()))
            return states

        for seed in (11, 12):
            trace = []
            sample_cfg(gen, "cb", 1.0, seed=seed, trace=trace)
            for (t, e, xs), (eo, xo) in zip(trace, oracle(row, seed)):
                ok &= np.array_equal(e, eo) and np.array_equal(xs, xo)
            trace0 = []
            sample_cfg(gen, "cb", 0.0, seed=seed, trace=trace0)
            for (t, e, xs), (eo, xo) in zip(trace0, oracle(0, seed)):
                ok &= np.array_equal(e, eo) and np.array_equal(xs, xo)
    _verdict(4, ok, "s=1 equals conditional and s=0 equals unconditional, per step, exactly")


@pytest.mark.acceptance
def test_criterion_05_selection_oracles():
    rng = RngStream(303)

    def brute_topk(confs, k):
        remaining = list(range(len(confs)))
        picked = []
        while remaining and len(picked) < k:
            best = remaining[0]
            for i in remaining[1:]:
                if confs[i] > confs[best]:
                    best = i
            picked.append(best)
            remaining.remove(best)
        return picked

    class Frozen:
        frozen = True

    ok = True
    for _ in range(1000):
        n = rng.randint(64) + 1
        # coarse grid of confidence values forces plenty of ties
        confs = [round(rng.uniform() * 4) / 4 for _ in range(n)]
        k = rng.randint(n) + 1
        cands = [type("C", (), {"confidence": c, "prompt": "", "sample": None})()
                 for c in confs]
        got = [cands.index(c) for c in selection.sample_topk(list(cands), k, Frozen())]
        ok &= got == brute_topk(confs, k)
        ok &= selection.select_policy(confs, k, "top") == brute_topk(confs, k)
        ok &= selection.select_policy(confs, k, "bottom") == \
            brute_topk([-c for c in confs], k)
        order = brute_topk(confs, n)
        start = (n - k) // 2
        ok &= selection.select_policy(confs, k, "middle") == order[start:start + k]
        picks = selection.select_policy(confs, k, "random", rng=RngStream(derive_key(1, n, k)))
        ok &= len(set(picks)) == k and all(0 <= p < n for p in picks)
        even = k - (k % 2)
        if even >= 2:
            top = order[:even // 2]
            rest = [i for i in range(n) if i not in top]
            bottom = [rest[i] for i in brute_topk([-confs[i] for i in rest], even // 2)]
            ok &= selection.select_policy(confs, even, "top_and_bottom") == top + bottom
    _verdict(5, ok, "top-k and all five policies match brute-force oracles on 1000 instances")


@pytest.mark.acceptance
def test_criterion_06_metric_oracle():
    # "exact" here means to double precision: the oracle values are summed
    # by hand in a different order, which legitimately differs by one ulp
    rep = continual.compute_metrics(np.full((4, 4), 0.7))
    exact_const = (abs(rep.transfer_mean - 0.7) < 1e-12
                   and abs(rep.avg_mean - 0.7) < 1e-12
                   and abs(rep.last_mean - 0.7) < 1e-12)
    m = np.array([[1.0, 0.4, 0.5],
                  [0.9, 0.8, 0.6],
                  [0.8, 0.7, 0.9]])
    rep = continual.compute_metrics(m)
    exact_fixture = (abs(rep.transfer["task2"] - (0.5 + 0.6) / 2) < 1e-12
                     and abs(rep.avg["task2"] - (0.5 + 0.6 + 0.9) / 3) < 1e-12
                     and rep.last["task2"] == 0.9
                     and rep.transfer["task1"] == 0.4)
    _verdict(6, exact_const and exact_fixture,
             "hand-computed 3-task fixture matches to double precision")


@pytest.mark.acceptance
def test_criterion_07_baseline_equivalence():
    cfg = ExperimentConfig({
        "suite.n_tasks": 2, "suite.classes_per_task": 3, "suite.base_classes": 4,
        "suite.train_per_class": 30, "suite.test_per_class": 10,
        "vlm.pretrain_steps": 150, "gen.pretrain_epochs": 6, "gen.pool_per_class": 10,
        "run.steps_per_task": 50, "run.batch": 16, "lora.epochs": 20, "select.m_pre": 3,
    })
    seq = continual.build_suite(cfg)
    pre = continual.build_models(seq, cfg, seed=1)
    disabled = cfg.with_overrides({"loss.use_cd": False, "loss.use_ita": False,
                                   "loss.use_awc": False})
    a = continual.run_method(seq, disabled, seed=1, pretrained=pre)
    b = continual.run_method(seq, cfg.with_overrides({"run.method": "continual_finetune"}),
                             seed=1, pretrained=pre)
    ok = (a.matrix.tobytes() == b.matrix.tobytes()
          and a.model.fingerprint() == b.model.fingerprint())
    _verdict(7, ok, "replay-disabled loop is bit-identical to continual finetuning")


# ---------------------------------------------------------- criteria 8-11

@pytest.fixture(scope="module")
def battery():
    """Five seeds x {method runs, bottom-policy run, paired confidences}."""
    cfg0 = ExperimentConfig()
    out = {"metrics": {}, "c8": [], "c8_time": 0.0}
    t0 = time.time()
    for seed in SEEDS:
        cfg = cfg0.with_overrides({"suite.seed": seed, "run.seed": seed})
        seq = continual.build_suite(cfg)
        pretrained = continual.build_models(seq, cfg, seed=seed)
        for method in ("adapter_replay", "frozen_generator_replay", "continual_finetune"):
            res = continual.run_method(seq, cfg.with_overrides({"run.method": method}),
                                       seed=seed, pretrained=pretrained)
            r = res.report
            out["metrics"].setdefault(method, []).append(
                {"last": r.last_mean, "transfer": r.transfer_mean,
                 "base_drop": r.base_row0 - r.base_final})
            if method == "adapter_replay":
                t8 = time.time()
                for i, task in enumerate(seq.tasks, start=1):
                    scorer = res.debug["scorers"][i - 1].model
                    b, a = continual.paired_generator_confidences(
                        res.generator, res.registry, scorer, task.class_names,
                        per_class=2, seed=500 + seed, guidance=cfg["gen.guidance"])
                    out["c8"].extend((a - b).tolist())
                out["c8_time"] += time.time() - t8
        res = continual.run_method(seq, cfg.with_overrides({"select.policy": "bottom"}),
                                   seed=seed, pretrained=pretrained)
        out["metrics"].setdefault("bottom_policy", []).append(
            {"last": res.report.last_mean})
    out["elapsed"] = time.time() - t0
    return out


def _mean(battery, method, key):
    return float(np.mean([m[key] for m in battery["metrics"][method]]))


@pytest.mark.acceptance
def test_criterion_08_domain_gap_closure(battery):
    diffs = np.asarray(battery["c8"])
    rs = np.random.RandomState(0)
    boot = np.array([rs.choice(diffs, len(diffs), replace=True).mean()
                     for _ in range(5000)])
    lower = float(np.percentile(boot, 2.5))
    ok = diffs.size >= 5 * 32 and lower > 0.0 and battery["c8_time"] < 600
    _verdict(8, ok,
             f"paired adapted-base confidence mean {diffs.mean():+.4f} over {diffs.size} "
             f"pairs, bootstrap 2.5% {lower:+.4f} (scoring took {battery['c8_time']:.0f}s)")


@pytest.mark.acceptance
def test_criterion_09_method_ordering(battery):
    ar = _mean(battery, "adapter_replay", "last")
    fg = _mean(battery, "frozen_generator_replay", "last")
    cf = _mean(battery, "continual_finetune", "last")
    ok = (ar >= fg and ar >= cf + 0.05 and fg >= cf + 0.05
          and battery["elapsed"] < 1800)
    _verdict(9, ok, f"mean Last: adapter {ar:.3f} >= frozen {fg:.3f}, both >= "
                    f"finetune {cf:.3f} + 5pp; battery took {battery['elapsed']:.0f}s")


@pytest.mark.acceptance
def test_criterion_10_stability(battery):
    ar_t = _mean(battery, "adapter_replay", "transfer")
    cf_t = _mean(battery, "continual_finetune", "transfer")
    ar_drop = _mean(battery, "adapter_replay", "base_drop")
    cf_drop = _mean(battery, "continual_finetune", "base_drop")
    ok = ar_t >= cf_t and ar_drop <= 0.05 and cf_drop > ar_drop
    _verdict(10, ok, f"Transfer {ar_t:.3f} >= {cf_t:.3f}; base drop {ar_drop:.3f} "
                     f"(<= 0.05) vs finetune {cf_drop:.3f}")


@pytest.mark.acceptance
def test_criterion_11_filter_policy_ordering(battery):
    top = _mean(battery, "adapter_replay", "last")
    bottom = _mean(battery, "bottom_policy", "last")
    _verdict(11, top >= bottom, f"mean Last: top filtering {top:.3f} >= bottom {bottom:.3f}")


# ---------------------------------------------------------- criteria 12-13

@pytest.mark.acceptance
def test_criterion_12_storage_accounting():
    cfg = ExperimentConfig({
        "suite.n_tasks": 2, "suite.classes_per_task": 3, "suite.base_classes": 4,
        "suite.train_per_class": 20, "suite.test_per_class": 8,
        "vlm.pretrain_steps": 100, "gen.pretrain_epochs": 4, "gen.pool_per_class": 8,
        "run.steps_per_task": 30, "run.batch": 16, "lora.epochs": 10, "select.m_pre": 2,
        "run.method": "real_replay", "run.real_replay_per_class": 2,
    })
    seq = continual.build_suite(cfg)
    pre = continual.build_models(seq, cfg, seed=1)
    res = continual.run_method(seq, cfg, seed=1, pretrained=pre)
    expected_real = 6 * 2 * 256 * 8  # task classes x per-class x pixels x f64
    real_ok = res.storage["real_replay_bytes"] == expected_real

    res2 = continual.run_method(seq, cfg.with_overrides({"run.method": "adapter_replay"}),
                                seed=1, pretrained=pre)
    r = cfg["lora.rank"]
    dims = [(256 + 16 + 16, 128), (128, 128), (128, 256)]
    expected_adapter = len(seq.tasks) * sum(r * (di + do) for di, do in dims) * 8
    adapter_ok = res2.storage["adapter_bytes"] == expected_adapter
    _verdict(12, real_ok and adapter_ok,
             f"real replay {res.storage['real_replay_bytes']} == {expected_real} B; "
             f"adapters {res2.storage['adapter_bytes']} == {expected_adapter} B")


@pytest.mark.acceptance
def test_criterion_13_run_determinism(tmp_path):
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(
        "suite.n_tasks = 2\nsuite.classes_per_task = 3\nsuite.base_classes = 4\n"
        "suite.train_per_class = 30\nsuite.test_per_class = 10\n"
        "vlm.pretrain_steps = 150\ngen.pretrain_epochs = 6\ngen.pool_per_class = 10\n"
        "run.steps_per_task = 50\nrun.batch = 16\nlora.epochs = 20\nselect.m_pre = 3\n")
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    ma = next((tmp_path / "a").iterdir()) / "metrics.json"
    mb = next((tmp_path / "b").iterdir()) / "metrics.json"
    identical = ma.read_bytes() == mb.read_bytes()
    _verdict(13, identical, "two identical runs produced byte-identical metrics.json")
