"""End-to-end acceptance checks on the desk-scale corpus.

Each test prints one ``ACCEPTANCE <name>: PASS|FAIL`` line; the lines are
also collected and repeated in the terminal summary.
"""

import json
import time
from dataclasses import asdict

import numpy as np
import pytest

import misure
from misure import MisureConfig, RiseConfig
from misure.adapters import finite_difference_vjp
from misure.baselines import rise_from_masks, rise_saliency, threshold_saliency
from misure.cli import main
from misure.harness import corrupted_adapters, run_explain, RunSettings, train_reliability
from misure.masks import DISK3, binarize_prediction, dice_explained, dice_hard, dilate, perturbation_ratio
from misure.minimal import find_msr, objective, objective_gradient
from misure.reliability import ReliabilityClassifier, roc_auc
from misure.triangle import check_member_geometry, generate_triangle

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.abs(b)))


def fd_gradient(adapter, x_sr, m, p_ref, label, cfg, step=1e-6):
    g = np.zeros_like(m)
    for idx in np.ndindex(m.shape):
        mp, mm = m.copy(), m.copy()
        mp[idx] += step
        mm[idx] -= step
        g[idx] = (objective(adapter, x_sr, mp, p_ref, label, cfg)[0]
                  - objective(adapter, x_sr, mm, p_ref, label, cfg)[0]) / (2 * step)
    return g


# 1 ---------------------------------------------------------------------------


def test_sr_contract(tiny_run, trained_adapter, test_samples, report):
    by_id = {s.image_id: s for s in test_samples}
    dices = [dice_hard(binarize_prediction(trained_adapter.forward(sr.x_sr), 1), tiny_run.refs[i])
             for i, sr in tiny_run.sr.items()]
    n_pred = sum(1 for s in test_samples
                 if binarize_prediction(trained_adapter.forward(s.image), 1).any())
    ok = (len(dices) == n_pred > 0 and all(d > 0.9 for d in dices)
          and tiny_run.sr_seconds < 120 and set(tiny_run.sr) <= set(by_id))
    assert report("sr-contract", ok,
                  f"{sum(d > 0.9 for d in dices)}/{n_pred} images with Dice > 0.9, "
                  f"min {min(dices):.4f}, {tiny_run.sr_seconds:.1f}s for {len(test_samples)} images")


# 2 ---------------------------------------------------------------------------


def test_gradient_oracle(trained_model_path, report):
    a = misure.load_toy_adapter(trained_model_path, 8)
    cfg = MisureConfig()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x_sr = rng.random((1, 8, 8))
        p_ref = a.forward(rng.random((1, 8, 8)))
        m = rng.uniform(0.3, 0.9, (8, 8))
        label = int(rng.integers(0, 2))
        g = objective_gradient(a, x_sr, m, p_ref, label, cfg)
        worst = max(worst, rel_err(g, fd_gradient(a, x_sr, m, p_ref, label, cfg)))
    a6 = misure.load_toy_adapter(trained_model_path, 6)
    vjp_worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x = rng.random((1, 6, 6))
        cot = rng.normal(size=(2, 6, 6))
        vjp_worst = max(vjp_worst, rel_err(a6.vjp(x, cot), finite_difference_vjp(a6, x, cot, step=1e-3)))
    ok = worst < 1e-3 and vjp_worst < 1e-3
    assert report("gradient-oracle", ok,
                  f"objective max rel err {worst:.2e} over 20 8x8 instances, VJP {vjp_worst:.2e} at 6x6")


# 3 ---------------------------------------------------------------------------


def test_clamp_and_support_invariants(tiny_run, report):
    cfg = MisureConfig()
    final_bad = 0
    for i, msr in tiny_run.msr.items():
        m = msr.m_msr
        nz = m[m != 0]
        if (nz.size and (nz.min() < cfg.clamp_low or nz.max() > 1)) or np.any((m != 0) & ~(tiny_run.sr[i].m_sr > 0)):
            final_bad += 1
    ok = not tiny_run.violations and final_bad == 0 and tiny_run.iterations_checked >= 100 * len(tiny_run.msr)
    assert report("clamp-support", ok,
                  f"{tiny_run.iterations_checked} iterates over {len(tiny_run.msr)} images, "
                  f"{len(tiny_run.violations)} violations")


# 4 ---------------------------------------------------------------------------


def test_msr_vs_sr_and_rise(tiny_run, trained_adapter, test_samples, report):
    t0 = time.perf_counter()
    de_msr = [m.metrics.dice_explained for m in tiny_run.msr.values()]
    pr_msr = [m.metrics.perturbation_ratio for m in tiny_run.msr.values()]
    pr_sr = [perturbation_ratio(tiny_run.sr[i].m_sr, tiny_run.refs[i]) for i in tiny_run.msr]
    cfg = RiseConfig(n_masks=2000, seed=0)
    de_rise, pr_rise = [], []
    by_id = {s.image_id: s for s in test_samples}
    for i in tiny_run.msr:
        x0 = by_id[i].image
        sal = rise_saliency(trained_adapter, x0, 1, cfg)
        keep = threshold_saliency(sal, 0.2)
        de_rise.append(dice_explained(trained_adapter, x0, x0 * keep[None], 1, reference=tiny_run.refs[i]))
        pr_rise.append(perturbation_ratio(keep, tiny_run.refs[i]))
    total = tiny_run.sr_seconds + tiny_run.msr_seconds + time.perf_counter() - t0
    ok = (np.mean(de_msr) >= 0.9 and np.mean(pr_msr) < np.mean(pr_sr)
          and np.mean(pr_msr) < np.mean(pr_rise) and total < 15 * 60)
    assert report("msr-vs-baselines", ok,
                  f"MSR dice {np.mean(de_msr):.3f} ratio {np.mean(pr_msr):.3f}; "
                  f"SR ratio {np.mean(pr_sr):.3f}; RISE(0.2) dice {np.mean(de_rise):.3f} "
                  f"ratio {np.mean(pr_rise):.3f}; {total:.0f}s")


# 5 ---------------------------------------------------------------------------


def test_lambda_sweep_trend(tiny_run, trained_adapter, test_samples, report):
    by_id = {s.image_id: s for s in test_samples}
    means = {}
    for lam in (0.001, 0.01, 0.1):
        cfg = MisureConfig(lr=0.1, lam=lam)
        ratios = []
        for i, sr in tiny_run.sr.items():
            if lam == 0.01:
                ratios.append(tiny_run.msr[i].metrics.perturbation_ratio)
                continue
            res = find_msr(trained_adapter, sr, by_id[i].image, 1, cfg)
            ratios.append(res.metrics.perturbation_ratio)
        means[lam] = float(np.mean(ratios))
    vals = [means[k] for k in (0.001, 0.01, 0.1)]
    ok = vals[0] >= vals[1] >= vals[2]
    assert report("lambda-trend", ok, "mean ratio " + ", ".join(f"lam={k}: {v:.4f}" for k, v in means.items()))


# 6 ---------------------------------------------------------------------------


def test_baseline_oracles(report):
    H = W = 16
    obj = np.zeros((H, W), bool)
    obj[5:11, 5:11] = True
    x0 = np.full((1, H, W), 0.4)
    x0[0, obj] = 0.9
    half = obj.copy()
    half[:11] = False
    fwd = lambda x: np.stack([1.0 - (f := (obj if x[0][7, 7] > 0 else half)), f.astype(float)])  # noqa: E731
    a = misure.FunctionAdapter(fwd, 2, (1, H, W))
    rng = np.random.default_rng(0)
    masks = (rng.random((8, H, W)) < 0.6) * rng.uniform(0.5, 1.0, (8, 1, 1))
    ref = obj
    s = np.zeros((H, W))
    for m in masks:
        pred = a.forward(x0 * m[None]).argmax(0) == 1
        s += dice_hard(pred, ref) * m
    s = (s - s.min()) / (s.max() - s.min())
    rise_err = float(np.max(np.abs(rise_from_masks(a, x0, 1, masks) - s)))

    dil_ok = True
    for k in range(50):
        m = np.random.default_rng(k).random((16, 16)) < 0.08
        brute = np.zeros_like(m)
        for y, x in zip(*np.nonzero(m)):
            for dy, dx in DISK3.offsets:
                if 0 <= y + dy < 16 and 0 <= x + dx < 16:
                    brute[y + dy, x + dx] = True
        dil_ok &= bool(np.array_equal(dilate(m), brute))

    auc_err = 0.0
    for k in range(30):
        r = np.random.default_rng(k)
        n = int(r.integers(4, 51))
        scores = r.integers(0, 8, n).astype(float)
        labels = np.arange(n) % 2 == 0
        pos, neg = scores[labels], scores[~labels]
        brute_auc = np.mean([1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg])
        auc_err = max(auc_err, abs(roc_auc(scores, labels)[0] - brute_auc))
    ok = rise_err <= 1e-6 and dil_ok and auc_err <= 1e-9
    assert report("baseline-oracles", ok,
                  f"RISE err {rise_err:.1e}, dilation exact on 50 masks: {dil_ok}, AUC err {auc_err:.1e}")


# 7 ---------------------------------------------------------------------------


def test_reliability_pipeline(trained_adapter, test_samples, report):
    table, _ = corrupted_adapters(trained_adapter, test_samples, label=1, fraction=0.5, seed=0)
    settings = RunSettings(write_artifacts=False)
    records, _ = run_explain(trained_adapter, test_samples, "misure", settings,
                             adapter_for=lambda s: table[s.image_id])
    rows = [{k: ("" if v is None else v) for k, v in asdict(r).items()} for r in records]
    res = train_reliability(rows, threshold=0.9, seed=0)[1]
    auc = res.get("auc", float("nan"))

    rng = np.random.default_rng(0)
    y = np.arange(40) % 2
    X = rng.normal(size=(40, 3))
    X[:, 1] += np.where(y == 1, 4.0, -4.0)
    sep_acc = float(np.mean(ReliabilityClassifier().fit(X, y).predict(X) == y))

    X = rng.normal(size=(400, 3))
    y = (X[:, 0] > 0).astype(int)
    perm = []
    for _ in range(10):
        yp = rng.permutation(y)
        model = ReliabilityClassifier().fit(X[:200], yp[:200])
        perm.append(roc_auc(model.predict_proba(X[200:])[:, 1], yp[200:])[0])
    ok = auc >= 0.8 and sep_acc == 1.0 and abs(np.mean(perm) - 0.5) <= 0.1
    assert report("reliability", ok,
                  f"holdout AUC {auc:.3f} (n_test={res.get('n_test')}), separable accuracy {sep_acc:.2f}, "
                  f"permuted-label AUC {np.mean(perm):.3f}")


# 8 ---------------------------------------------------------------------------


def test_cli_determinism(trained_model_path, tmp_path, report):
    from misure.io import read_csv

    def tree(root):
        out = {}
        for p in sorted(root.rglob("*")):
            if p.is_file():
                data = p.read_bytes()
                if p.name == "records.csv":
                    data = json.dumps([{k: v for k, v in r.items() if k != "wall_time_s"}
                                       for r in read_csv(p)]).encode()
                out[str(p.relative_to(root))] = data
        return out

    trees, codes = [], []
    for run in ("a", "b"):
        root = tmp_path / run
        data = root / "data"
        common = ["--data", str(data), "--model", str(trained_model_path), "--split", "all", "--limit", "4"]
        codes.append(main(["dataset", "--n", "8", "--seed", "5", "--out", str(data)]))
        codes.append(main(["explain", *common, "--out", str(root / "explain")]))
        codes.append(main(["sweep", *common, "--iters", "20",
                           "--values", json.dumps({"lr": [0.01, 0.1], "lam": [0.01, 0.1]}),
                           "--out", str(root / "sweep")]))
        trees.append(tree(root))
    diff = sorted(set(trees[0]) ^ set(trees[1])) + [k for k in trees[0] if trees[0][k] != trees[1].get(k)]
    ok = not diff and codes == [0] * 6
    assert report("determinism", ok, f"{len(trees[0])} files compared, {len(diff)} differ, exit codes {codes}")


# 9 ---------------------------------------------------------------------------


def test_dataset_contract(report):
    split = generate_triangle(2000)
    bad = sum(not check_member_geometry(s) for s in split.train + split.val)
    ok = (len(split.train), len(split.val)) == (1400, 600) and bad == 0
    assert report("dataset-contract", ok, f"{len(split.train)}/{len(split.val)} split, {bad} geometry failures")
