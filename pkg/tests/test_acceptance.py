"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear in the
terminal summary) or ``python tests/test_acceptance.py`` (lines on stdout).

Criterion 6 trains six models (full and CSLB-off, three seeds each) for
3000 iterations.  ``python tests/test_acceptance.py train`` runs those jobs,
in parallel up to the CPU count, and stores checkpoints, metrics logs and
wall times under ``acceptance_runs/``.  The test itself re-evaluates the
stored checkpoints on the held-out scenes; it never reuses stored metrics.
"""

from __future__ import annotations

import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numba
import numpy as np
import pytest

from corrprune import audit, checkpoint, cli, geometry, ssm, training
from corrprune import diffmath as dm
from corrprune import nn, sequencer
from corrprune.model import ModelConfig, TrainConfig, ablation, forward, init_params
from corrprune.synthdata import SceneSpec, generate_scene

RUNS = Path(__file__).resolve().parent.parent / "acceptance_runs" / "learnability"

# ---------------------------------------------------------------- oracles


@numba.njit
def _scan_loop(x, delta, A, B, C, D, zoh):
    """Scalar recurrence h <- exp(dt a) h + bbar x, y = C.h + D x."""
    nb, length, ch = x.shape
    ns = A.shape[1]
    y = np.zeros((nb, length, ch))
    for b in range(nb):
        for c in range(ch):
            for s in range(ns):
                h = 0.0
                a = A[c, s]
                for t in range(length):
                    dt = delta[b, t, c]
                    if zoh:
                        bbar = math.expm1(dt * a) / a * B[b, t, s]
                    else:
                        bbar = dt * B[b, t, s]
                    h = math.exp(dt * a) * h + bbar * x[b, t, c]
                    y[b, t, c] += C[b, t, s] * h
            for t in range(length):
                y[b, t, c] += D[c] * x[b, t, c]
    return y


def _grid_auc(errors, thr, step=0.01):
    """Trapezoid integral of the recall curve sampled every ``step`` degrees.

    The curve passes through (0, 0) and (e_k, k/n) for the sorted errors and
    is linear in between; past the largest finite error it stays flat.
    """
    errs = sorted(errors)
    n = len(errs)
    pts = [(0.0, 0.0)] + [(e, (k + 1) / n) for k, e in enumerate(errs) if math.isfinite(e)]

    steps = int(round(thr / step))
    ys, seg = [], 0
    for i in range(steps + 1):
        x = i * step
        while seg + 1 < len(pts) and pts[seg + 1][0] < x:
            seg += 1
        if seg + 1 == len(pts):
            ys.append(pts[-1][1])
            continue
        (x0, y0), (x1, y1) = pts[seg], pts[seg + 1]
        ys.append(y0 if x1 == x0 else y0 + (y1 - y0) * (x - x0) / (x1 - x0))
    return sum((ys[i] + ys[i + 1]) * step / 2 for i in range(steps)) / thr


def _sign_free(A, B):
    A = A / np.linalg.norm(A)
    B = B / np.linalg.norm(B)
    return min(np.linalg.norm(A - B), np.linalg.norm(A + B))


# ------------------------------------------------------------ criterion 1


def test_criterion_1_model_gradcheck(acceptance_report, capsys):
    t0 = time.perf_counter()
    code = cli.main(["gradcheck", "model"])
    elapsed = time.perf_counter() - t0
    printed = capsys.readouterr()
    report = audit.audit_model()
    groups = {e.name.rsplit(".", 1)[0] for e in report.entries}
    ok = code == 0 and report.passed and elapsed < 300
    acceptance_report(1, ok, f"gradcheck model exit {code}; {len(report.entries)} parameter tensors "
                             f"in {len(groups)} groups at rtol {report.rtol:g} / atol "
                             f"{report.atol:g}, max_abs {report.max_abs:.2e}, failures "
                             f"{[e.name for e in report.failures()]}; {elapsed:.1f}s (< 300s)")
    assert ok, printed.err


# ------------------------------------------------------------ criterion 2


def test_criterion_2_scan_oracle(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_oracle = worst_blocked = 0.0
    for i in range(100):
        length = int(rng.integers(1, 257))
        ch = int(rng.integers(1, 65))
        ns = int(rng.integers(1, 17))
        inp = ssm.random_scan_inputs(rng, 1, length, ch, ns)
        rule = ("euler", "zoh")[i % 2]
        y = ssm.scan(inp.x, inp.delta, inp.A, inp.B, inp.C, inp.D, input_rule=rule).value
        ref = _scan_loop(inp.x, inp.delta, inp.A, inp.B, inp.C, inp.D, rule == "zoh")
        worst_oracle = max(worst_oracle, float(np.abs(y - ref).max()))
        naive = ssm.selective_scan_naive(inp.x, inp.delta, inp.A, inp.B, inp.C, inp.D, rule)
        for bs in sorted({1, 2, 7, length}):
            blocked = ssm.selective_scan_blocked(inp.x, inp.delta, inp.A, inp.B, inp.C, inp.D,
                                                 bs, rule)
            worst_blocked = max(worst_blocked, float(np.abs(blocked - naive).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_oracle <= 1e-10 and worst_blocked <= 1e-12 and elapsed < 60
    acceptance_report(2, ok, f"scan vs loop max {worst_oracle:.1e} (<= 1e-10), blocked vs naive "
                             f"max {worst_blocked:.1e} (<= 1e-12), {elapsed:.1f}s (< 60s)")
    assert ok


# ------------------------------------------------------------ criterion 3


def test_criterion_3_eight_point(acceptance_report):
    worst_E = worst_pose = 0.0
    for seed in range(20):
        scene = generate_scene(SceneSpec(n_points=128, outlier_ratio=0.0, noise_sigma=0.0,
                                         seed=seed))
        corr = scene.corr
        E = geometry.weighted_eight_point(corr.coords, np.ones(len(corr)))
        worst_E = max(worst_E, _sign_free(E, corr.essential))
        R, t = geometry.decompose_essential(E, corr.coords)
        worst_pose = max(worst_pose, geometry.pose_error(R, t, scene.rotation,
                                                         scene.translation).pose)
    worst_zero = 0.0
    for seed in range(20):
        corr = generate_scene(SceneSpec(n_points=128, outlier_ratio=0.5, noise_sigma=1e-3,
                                        seed=100 + seed)).corr
        w = np.random.default_rng(seed).uniform(0.1, 1.0, len(corr)) * corr.labels
        keep = w > 0
        full = geometry.weighted_eight_point(corr.coords, w)
        sub = geometry.weighted_eight_point(corr.coords[keep], w[keep])
        worst_zero = max(worst_zero, _sign_free(full, sub))
    ok = worst_E < 1e-6 and worst_pose < 0.1 and worst_zero <= 1e-12
    acceptance_report(3, ok, f"E error max {worst_E:.1e} (< 1e-6), pose error max "
                             f"{worst_pose:.1e} deg (< 0.1), zero-weight rows {worst_zero:.1e} "
                             f"(<= 1e-12)")
    assert ok


# ------------------------------------------------------------ criterion 4


def _cslb_instance(rng, n, d):
    b = nn.ParamBuilder(rng)
    sequencer.init_scorer(b, "scorer", d)
    for name in list(b.params):
        if name.endswith(".b"):
            b.params[name] = rng.normal(scale=0.1, size=b.params[name].shape)
    return b.params, rng.normal(size=(1, n, d))


def test_criterion_4_straight_through(acceptance_report):
    rng = np.random.default_rng(44)
    exact = 0
    for _ in range(100):
        params, F = _cslb_instance(rng, int(rng.integers(2, 65)), int(rng.integers(1, 17)))
        out, co = sequencer.causal_sequence(params, F, tau=float(rng.uniform(0.2, 2.0)),
                                            noise_enabled=True, rng=rng, train=True)
        same = np.array_equal(out.value, np.take_along_axis(F, co.index[..., None], axis=1))
        multiset = np.array_equal(np.sort(out.value.reshape(-1)), np.sort(F.reshape(-1)))
        exact += bool(same and multiset)
    grads_ok = fd_ok = 0
    worst = 0.0
    for i in range(10):
        params, F = _cslb_instance(rng, 12, 8)
        w = rng.normal(size=(1, 12, 8))
        seed = 1000 + i
        _, base = sequencer.causal_sequence(params, F, tau=0.7, noise_enabled=True,
                                            rng=np.random.default_rng(seed), train=True)
        anchor = (base.index, base.soft.value)

        def f(P, w=w, seed=seed, anchor=anchor, F=F):
            Fs, _ = sequencer.causal_sequence(P, F, tau=0.7, noise_enabled=True,
                                              rng=np.random.default_rng(seed), train=True,
                                              anchor=anchor)
            return dm.sum(Fs * w)

        _, g = dm.value_and_grad(f, params)
        grads_ok += all(np.any(g[k] != 0) for k in ("scorer.fc1.w", "scorer.fc2.w"))
        rep = dm.finite_diff_check(f, params, rtol=1e-3, atol=1e-6)
        fd_ok += rep.passed
        worst = max(worst, rep.max_abs)
    ok = exact == 100 and grads_ok == 10 and fd_ok == 10
    acceptance_report(4, ok, f"bit-exact permutations {exact}/100, nonzero scorer gradients "
                             f"{grads_ok}/10, finite-difference agreement {fd_ok}/10 "
                             f"(rtol 1e-3, max_abs {worst:.1e})")
    assert ok


# ------------------------------------------------------------ criterion 5


def test_criterion_5_permutation_equivariance(acceptance_report, monkeypatch):
    cfg = ModelConfig(n_layers=2, d=32, n_state=4, dtype="float64")
    corr = generate_scene(SceneSpec(n_points=64, outlier_ratio=0.5, noise_sigma=1e-3,
                                    seed=5)).corr
    seen = []
    plain = sequencer.score

    def recording(*args, **kwargs):
        out = plain(*args, **kwargs)
        seen.append(np.asarray(getattr(out, "value", out)))
        return out

    monkeypatch.setattr(sequencer, "score", recording)
    rng = np.random.default_rng(55)
    exact = distinct = 0
    for model_seed in range(5):
        params, state = init_params(cfg, model_seed)
        seen.clear()
        base = forward(corr.coords, params, cfg, state, mode="eval", essentials=False)
        distinct += bool(seen) and all(len(np.unique(s[0])) == s.shape[-1] for s in seen)
        for _ in range(20):
            perm = rng.permutation(len(corr))
            out = forward(corr.coords[perm], params, cfg, state, mode="eval", essentials=False)
            exact += np.array_equal(out.final_logits[0], base.final_logits[0][perm])
    ok = exact == 100 and distinct == 5
    acceptance_report(5, ok, f"exact logit permutations {exact}/100 (20 permutations x 5 models), "
                             f"models with distinct CSLB scores {distinct}/5")
    assert ok


# ------------------------------------------------------------ criterion 6

LEARN_SPEC = SceneSpec(n_points=512, outlier_ratio=0.7, noise_sigma=1e-3)
LEARN_TRAIN = (2000, 60_000)  # (scenes, base seed)
LEARN_TEST = (200, 70_000)
LEARN_SEEDS = (0, 1, 2)
LEARN_MODEL = ModelConfig(n_layers=2, d=32, d_inner=32, n_state=4, dtype="float32",
                          reg_reduction="mean")
LEARN_TRAIN_CFG = TrainConfig(iterations=3000, batch_size=16, beta_warmup=1500,
                              checkpoint_every=1000, log_every=10)
VARIANTS = {"full": LEARN_MODEL, "cslb_off": ablation(LEARN_MODEL, "v")}


def _fingerprint():
    return json.dumps({"spec": repr(LEARN_SPEC), "train": LEARN_TRAIN, "test": LEARN_TEST,
                       "seeds": LEARN_SEEDS, "model": repr(LEARN_MODEL),
                       "train_cfg": repr(LEARN_TRAIN_CFG)}, sort_keys=True)


def _train_job(args):
    variant, seed = args
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        t0 = time.perf_counter()
        bank = training.SceneBank.synthetic(LEARN_SPEC, LEARN_TRAIN[0], LEARN_TRAIN[1])
        out = RUNS / f"{variant}_seed{seed}"
        training.train(replace(LEARN_TRAIN_CFG, seed=seed), VARIANTS[variant], bank,
                       out_dir=out, metrics_path=out / "metrics.tsv")
        return variant, seed, time.perf_counter() - t0


def run_learnability(workers=None):
    """Train every (variant, seed) pair; returns the manifest it writes."""
    workers = workers or os.cpu_count() or 1
    jobs = [(v, s) for v in VARIANTS for s in LEARN_SEEDS]
    RUNS.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        results = list(pool.map(_train_job, jobs))
    manifest = {"fingerprint": _fingerprint(), "workers": workers, "cpu_count": os.cpu_count(),
                "wall_seconds": time.perf_counter() - t0,
                "jobs": [{"variant": v, "seed": s, "seconds": sec} for v, s, sec in results]}
    (RUNS / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def _learn_checkpoints():
    path = RUNS / "manifest.json"
    if not path.exists():
        return None, "no trained runs (python tests/test_acceptance.py train)"
    manifest = json.loads(path.read_text())
    if manifest.get("fingerprint") != _fingerprint():
        return None, "stored runs were trained with different settings"
    ckpts = {}
    for v in VARIANTS:
        for s in LEARN_SEEDS:
            ck = checkpoint.load(RUNS / f"{v}_seed{s}" / "final.cmck")
            if ck.iteration != LEARN_TRAIN_CFG.iterations:
                return None, f"{v} seed {s} stopped at iteration {ck.iteration}"
            ckpts[v, s] = ck
    return (manifest, ckpts), ""


@pytest.fixture(scope="module")
def learn_eval():
    loaded, why = _learn_checkpoints()
    if loaded is None:
        return None, why
    manifest, ckpts = loaded
    t0 = time.perf_counter()
    test = training.SceneBank.synthetic(LEARN_SPEC, LEARN_TEST[0], LEARN_TEST[1])
    reports = {}
    for (v, s), ck in ckpts.items():
        reports[v, s] = training.evaluate(ck, test, "weighted", seed=s)
    for s in LEARN_SEEDS:
        reports["untrained", s] = training.evaluate(training.untrained(LEARN_MODEL, seed=s),
                                                    test, "weighted", seed=s)
        reports["full_ransac", s] = training.evaluate(ckpts["full", s], test, "ransac_post",
                                                      seed=s)
    return (manifest, reports, time.perf_counter() - t0), ""


def _mean(reports, variant, key):
    vals = [getattr(reports[variant, s], key) if key != "auc5" else reports[variant, s].auc[5.0]
            for s in LEARN_SEEDS]
    return float(np.mean(vals)), vals


def test_criterion_6_learnability(acceptance_report, learn_eval):
    data, why = learn_eval
    if data is None:
        acceptance_report(6, False, why)
        pytest.fail(why)
    manifest, reports, eval_seconds = data
    f1, f1s = _mean(reports, "full", "f1")
    auc, aucs = _mean(reports, "full", "auc5")
    auc_u, _ = _mean(reports, "untrained", "auc5")
    auc_v, aucs_v = _mean(reports, "cslb_off", "auc5")
    runtime = manifest["wall_seconds"] + eval_seconds
    checks = {"f1": f1 >= 0.85, "vs_untrained": auc - auc_u >= 0.02,
              "vs_cslb_off": auc - auc_v >= 0.02, "runtime": runtime <= 7200}
    ok = all(checks.values())
    acceptance_report(
        6, ok,
        f"F1 {f1:.3f} {np.round(f1s, 3).tolist()} (>= 0.85); AUC@5 full {auc:.4f} "
        f"{np.round(aucs, 4).tolist()}, untrained {auc_u:.4f}, CSLB-off {auc_v:.4f} "
        f"{np.round(aucs_v, 4).tolist()} (margins >= 0.02: {auc - auc_u:+.4f}, "
        f"{auc - auc_v:+.4f}); runtime {runtime / 3600:.2f} h on {manifest['cpu_count']} CPU "
        f"(<= 2 h); failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# ------------------------------------------------------------ criterion 7


def test_criterion_7_schedule(acceptance_report, tmp_path):
    cfg = TrainConfig(iterations=14, batch_size=2, decay_start=8, lr_decay=0.9, beta_warmup=5,
                      seed=7, checkpoint_every=100, log_every=1)
    bank = training.SceneBank.synthetic(SceneSpec(n_points=32, outlier_ratio=0.5,
                                                  noise_sigma=1e-3), 4, 3)
    model = ModelConfig(n_layers=1, d=8, n_state=4, k=4, groups=2)
    training.train(cfg, model, bank, metrics_path=tmp_path / "metrics.tsv")
    rows = training.read_metrics(tmp_path / "metrics.tsv")
    lr_ok = all((r[3] == 1e-3) == (r[0] <= cfg.decay_start) for r in rows)
    lr_ok &= all(r[3] == pytest.approx(1e-3 * 0.9 ** (r[0] - 8)) for r in rows if r[0] > 8)
    beta_ok = [r[4] for r in rows] == [0.0] * 5 + [0.5] * 9
    defaults = TrainConfig()
    const_ok = defaults.lr == 1e-3 and defaults.beta == 0.5
    ok = lr_ok and beta_ok and const_ok
    acceptance_report(7, ok, f"lr 1e-3 through iteration {cfg.decay_start} then decays: {lr_ok}; "
                             f"beta 0 -> 0.5 at iteration {cfg.beta_warmup}: {beta_ok}; "
                             f"defaults lr 1e-3 / beta 0.5: {const_ok}")
    assert ok


# ------------------------------------------------------------ criterion 8


def test_criterion_8_auc(acceptance_report):
    rng = np.random.default_rng(88)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 60))
        errs = rng.exponential(8.0, size=n)
        errs[rng.random(n) < 0.1] = np.inf
        got = geometry.pose_auc(errs, (5.0, 10.0, 20.0))
        for thr, g in zip((5.0, 10.0, 20.0), got):
            worst = max(worst, abs(g - _grid_auc(list(errs), thr)))
    ok = worst <= 1e-3
    acceptance_report(8, ok, f"max deviation from 0.01-degree grid {worst:.1e} (<= 1e-3)")
    assert ok


# ------------------------------------------------------------ criterion 9


def test_criterion_9_ransac(acceptance_report, learn_eval):
    recalls = []
    for seed in range(10):
        corr = generate_scene(SceneSpec(n_points=512, outlier_ratio=0.9, noise_sigma=0.0,
                                        seed=seed)).corr
        _, mask = geometry.ransac_eight_point(corr.coords, seed=seed)
        truth = corr.labels == 1
        recalls.append(float((mask & truth).sum() / truth.sum()))
    recall = float(np.mean(recalls))
    part_a = recall >= 0.95
    data, why = learn_eval
    if data is None:
        part_b, detail_b = False, why
    else:
        _, reports, _ = data
        post, _ = _mean(reports, "full_ransac", "auc5")
        weighted, _ = _mean(reports, "full", "auc5")
        part_b = post >= weighted - 0.01
        detail_b = f"ransac_post AUC@5 {post:.4f} vs weighted {weighted:.4f} (>= weighted - 0.01)"
    ok = part_a and part_b
    acceptance_report(9, ok, f"RANSAC inlier recall {recall:.3f} {np.round(recalls, 2).tolist()} "
                             f"(>= 0.95); {detail_b}")
    assert ok


# ------------------------------------------------------------------- main


if __name__ == "__main__":
    if sys.argv[1:2] == ["train"]:
        workers = int(sys.argv[2]) if len(sys.argv) > 2 else None
        print(json.dumps(run_learnability(workers), indent=1))
    else:
        sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
