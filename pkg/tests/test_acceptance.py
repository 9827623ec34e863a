"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The continual runs are shared through module fixtures; the whole module takes
several CPU minutes.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from ragstereo.arch import CellGenotype, OperationKind, build_base_topology
from ragstereo.config import GrowthConfig, RegimeConfig, RouterConfig, RunConfig, SearchConfig
from ragstereo.growth import (GrowthLedger, average_reuse_rate, finalize_path, growth_loop,
                              growth_score, init_growth_state, record_growth_trial, run_growth,
                              update_growth_probabilities)
from ragstereo.harness import run_continual, run_finetune_baseline
from ragstereo.metrics import compute_bwt, d1_all, epe
from ragstereo.proxy import (build_proxy_dataset, color_transfer, mean_color_distance,
                             scene_color_stats)
from ragstereo.router import RepresentationEncoder, RouterBank, route, train_router_entry
from ragstereo.scenes import SceneSpec, generate_scene
from ragstereo.search import (init_search_state, record_trial, sample_selection,
                              update_probabilities)
from ragstereo.stereo_net import photometric_terms, self_supervised_loss, smooth_l1_loss

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
RESULTS = {}


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.get_plugin("terminalreporter")
    lines = [f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {note}"
             for n, (ok, note) in sorted(RESULTS.items())]
    if tr is not None:
        tr.write_line("")
        for line in lines:
            tr.write_line(line)
    else:
        print("\n".join(lines))


def verdict(n, checks):
    """Record criterion ``n`` from named boolean checks, then fail on any false one."""
    failed = [name for name, ok in checks.items() if not ok]
    note = "; ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items())
    RESULTS[n] = (not failed, note)
    print(f"criterion {n} {'PASS' if not failed else 'FAIL'}: {note}")
    assert not failed, f"criterion {n} failed: {failed}"


# continual runs shared by criteria 1, 2, 10 and 11

def styled_scenes(seed):
    kw = dict(height=36, width=36, pairs=32, test_pairs=8)
    return [SceneSpec("warm", tint=(1.5, 0.5, 0.4), disp_min=2, disp_max=8,
                      seed=100 * seed + 1, **kw),
            SceneSpec("blue", tint=(0.4, 0.5, 1.5), brightness=-0.1, disp_min=12, disp_max=20,
                      seed=100 * seed + 2, **kw),
            SceneSpec("green", tint=(0.4, 1.5, 0.5), brightness=0.05, disp_min=13, disp_max=20,
                      seed=100 * seed + 3, **kw)]


def run_config(seed):
    return RunConfig(scenes=styled_scenes(seed), search=SearchConfig(trials=16),
                     growth=GrowthConfig(trials=16), regime=RegimeConfig(epochs=20),
                     router=RouterConfig(), seed=seed)


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_ckpt")


@pytest.fixture(scope="module")
def rag_runs(checkpoints):
    runs = {}
    for seed in SEEDS:
        start = time.perf_counter()
        kwargs = {"checkpoint_dir": checkpoints} if seed == 0 else {}
        report, state = run_continual(run_config(seed), **kwargs)
        runs[seed] = (report, state, time.perf_counter() - start)
    return runs


@pytest.fixture(scope="module")
def finetune_runs():
    return {seed: run_finetune_baseline(run_config(seed)) for seed in SEEDS}


def test_criterion_01_bit_exact_no_forgetting(rag_runs):
    report, state, seconds = rag_runs[0]
    same = all(np.array_equal(state.predictions[(t, 1)], state.predictions[(1, 1)])
               and state.predictions[(t, 1)].tobytes() == state.predictions[(1, 1)].tobytes()
               for t in (2, 3))
    bwt = compute_bwt(report.errors, 3)
    verdict(1, {"scene1 predictions identical": same,
                "bwt exactly zero": bwt == (0.0, 0.0) and report.bwt == (0.0, 0.0),
                f"runtime {seconds:.0f}s <= 1800s": seconds <= 1800})


def test_criterion_02_finetune_forgets(rag_runs, finetune_runs):
    checks = {}
    for seed in SEEDS:
        ft = finetune_runs[seed]
        rag = rag_runs[seed][0]
        first, last = ft.errors.get(1, 1)[0], ft.errors.get(3, 1)[0]
        degradation = (last - first) / first
        checks[f"seed{seed} bwt_epe {ft.bwt[0]:.3f} > 0"] = ft.bwt[0] > 0
        checks[f"seed{seed} degradation {degradation:.0%} >= 20%"] = degradation >= 0.2
        checks[f"seed{seed} fae {rag.fae[0]:.3f} <= {ft.fae[0]:.3f}"] = rag.fae[0] <= ft.fae[0]
    verdict(2, checks)


def two_way(x0, x1):
    p1 = 1.0 / (1.0 + math.exp(x0 - x1))
    return 1.0 - p1, p1


def test_criterion_03_search_dynamics():
    # (selected, error, net gain minus decay worked out by hand)
    script = [(0, 0.5, 0), (0, 0.4, 0), (1, 0.2, +1), (1, 0.5, 0), (1, 0.3, 0), (1, 0.6, -1)]
    state = init_search_state(["e"], K=2, seed=0)
    x, worst = [0.5, 0.5], 0.0
    for sel, err, net in script:
        record_trial(state, (sel,), err)
        update_probabilities(state, (sel,))
        x[sel] += 0.01 * net
        x = list(two_way(*x))
        worst = max(worst, abs(state.prob[0, 0] - x[0]), abs(state.prob[0, 1] - x[1]))
    rng = np.random.default_rng(2024)
    fuzz = init_search_state(list(range(6)), K=3, seed=1)
    simplex = True
    for _ in range(10_000):
        sel = sample_selection(fuzz)
        record_trial(fuzz, sel, float(rng.random()))
        update_probabilities(fuzz, sel)
        simplex &= bool(np.all(fuzz.prob > 0) and np.all(np.abs(fuzz.prob.sum(1) - 1) < 1e-9))
    verdict(3, {f"trace max gap {worst:.1e} < 1e-12": worst < 1e-12,
                "simplex over 10000 trials": simplex})


def test_criterion_04_growth_init_exact():
    expect = {2: [Fraction(2, 3), Fraction(1, 3)], 4: [Fraction(2, 7)] * 3 + [Fraction(1, 7)]}
    checks = {}
    for t, fracs in expect.items():
        s = init_growth_state(t, layers=2, gamma=2)
        gap = max(abs(Fraction(float(p)) - f) for row in s.prob for p, f in zip(row, fracs))
        checks[f"t={t} gap {float(gap):.1e} <= 1e-15"] = gap <= Fraction(1, 10**15)
    verdict(4, checks)


CONV_F = CellGenotype.uniform("feature", OperationKind.CONV2D_3X3)


def stub_growth(evaluator, trials, seed):
    """Task 2 growth on two equally sized layers with a stubbed error rate.

    Returns (task 2 path, task 1 path)."""
    topo = build_base_topology(feature_layers=2, matching_layers=0)
    led = GrowthLedger(topo)
    modules = {}
    old, _ = run_growth(None, None, led, 1, {j: (CONV_F, object()) for j in range(2)}, modules)
    led.freeze_task(1)
    path, _ = run_growth(None, None, led, 2, {j: (CONV_F, object()) for j in range(2)},
                         modules, trials=trials, evaluator=evaluator, seed=seed)
    return tuple(path), tuple(old)


def enumerate_equal_error(depth=4, trials=60):
    """Every branch of the first ``depth`` trials, each continued to ``trials``;
    returns the set of finalized paths and the total branch probability."""
    per_cell, paths, mass_total = 100.0, set(), 0.0
    reuse = lambda sel: per_cell * sum(k == 0 for k in sel)
    for i, prefix in enumerate(itertools.product(itertools.product((0, 1), repeat=2),
                                                 repeat=depth)):
        s = init_growth_state(2, layers=2, gamma=2, c0=10, target=per_cell, total=2 * per_cell)
        mass = 1.0
        for sel in prefix:
            mass *= s.prob[0][sel[0]] * s.prob[1][sel[1]]
            record_growth_trial(s, sel, growth_score(0.3, reuse(sel), per_cell))
            update_growth_probabilities(s, sel)
        growth_loop(s, lambda sel: 0.3, reuse, trials - depth, np.random.default_rng(i))
        paths.add(finalize_path(s))
        mass_total += mass
    return paths, mass_total


def test_criterion_05_growth_score_properties():
    sig = np.linspace(0, 1, 100)
    phi_m = np.linspace(0, 3, 100)
    grid = np.array([[growth_score(s, p, 1.0) for p in phi_m] for s in sig])
    monotone = (np.all(np.diff(grid, axis=0) <= 0) and np.all(np.diff(grid, axis=1) >= 0)
                and np.all(np.diff(grid[:, 1:], axis=0) < 0)
                and np.all(np.diff(grid[:-1], axis=1) > 0))
    ln2 = abs(growth_score(0.0, 7.5, 7.5) - math.log(2)) < 1e-12
    paths, mass = enumerate_equal_error()
    enumerated = paths == {(0, 0)} and abs(mass - 1) < 1e-12
    all_old = all(path == old for path, old in
                  (stub_growth(lambda sel: 0.3, 60, seed) for seed in range(10)))
    hits = 0
    for seed in range(10):
        # candidate index 0 is the old cell in every layer, 1 the new one
        sigma = lambda sel: 0.05 if all(k == 1 for k in sel) else 0.9
        path, old = stub_growth(sigma, 80, seed)
        hits += all(p != o for p, o in zip(path, old))
    verdict(5, {"monotone 100x100 grid": bool(monotone), "ln 2 at zero error": ln2,
                "equal error enumeration all old": enumerated,
                "equal error reuses all old cells (10 seeds)": all_old,
                f"strong new cell all-new in {hits}/10 >= 9": hits >= 9})


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(7)
    exact, conjunction = True, set()
    for _ in range(100):
        gt = rng.uniform(0, 120, (16, 16))
        err = rng.choice([-1, 1], (16, 16)) * rng.choice(
            [rng.uniform(0, 2), 3.0, rng.uniform(3, 7), rng.uniform(7, 12)], (16, 16))
        pred = gt + err
        mask = rng.random((16, 16)) > 0.3
        mask[0, 0] = True
        total, bad, n = Fraction(0), 0, 0
        for y in range(16):
            for x in range(16):
                if mask[y, x]:
                    e = abs(float(pred[y, x]) - float(gt[y, x]))
                    total += Fraction(e)
                    n += 1
                    over_abs, over_rel = e > 3, e > 0.05 * abs(float(gt[y, x]))
                    conjunction.add((over_abs, over_rel))
                    bad += over_abs and over_rel
        exact &= epe(pred, gt, mask) == float(total) / n
        exact &= d1_all(pred, gt, mask) == 100.0 * bad / n
    verdict(6, {"exact match on 100 maps": bool(exact),
                "all four threshold cases seen": len(conjunction) == 4})


def fd_relative_error(fn, x, step=1e-5):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for k in range(flat.numel()):
        plus, minus = flat.clone(), flat.clone()
        plus[k] += step
        minus[k] -= step
        numeric.view(-1)[k] = (fn(plus.view_as(x)) - fn(minus.view_as(x))) / (2 * step)
    return float((x.grad - numeric).norm() / numeric.norm())


def test_criterion_07_differentiability():
    g = torch.Generator().manual_seed(11)
    gt = torch.rand(1, 8, 8, generator=g, dtype=torch.float64) * 6
    pred = gt + (torch.rand(1, 8, 8, generator=g, dtype=torch.float64) - 0.5) * 4
    mask = torch.rand(1, 8, 8, generator=g) > 0.2
    r_sup = fd_relative_error(lambda d: smooth_l1_loss(d, gt, mask), pred)
    left = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    right = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    disp = 1.2 + torch.rand(1, 8, 8, generator=g, dtype=torch.float64) * 1.6
    r_self = fd_relative_error(lambda d: self_supervised_loss(left, right, d), disp)
    img = torch.rand(1, 3, 12, 24, generator=g, dtype=torch.float64)
    shifted = torch.zeros_like(img)
    shifted[..., :-4] = img[..., 4:]
    _, l1, _ = photometric_terms(img, shifted, torch.full((1, 12, 24), 4.0, dtype=torch.float64))
    interior = float(l1[..., 4:].max())
    verdict(7, {f"smooth L1 fd {r_sup:.1e} < 1e-4": r_sup < 1e-4,
                f"self-supervised fd {r_self:.1e} < 1e-4": r_self < 1e-4,
                f"4px warp interior L1 {interior:.1e} < 1e-3": interior < 1e-3})


def test_criterion_08_router():
    tints = [(1.5, 0.5, 0.4), (0.4, 0.5, 1.5), (0.4, 1.5, 0.5), (1.3, 1.3, 0.3)]
    shifts = [0.0, -0.1, 0.05, 0.1]
    data = [generate_scene(SceneSpec(f"s{k}", tint=t, brightness=b, height=36, width=36,
                                     pairs=16, test_pairs=6, seed=40 + k))
            for k, (t, b) in enumerate(zip(tints, shifts))]
    checks = {}
    for seed in SEEDS:
        acc = {}
        for lam in (0.0, 0.1):
            bank = RouterBank(RepresentationEncoder(seed=seed), lam=lam)
            for t, ds in enumerate(data):
                train_router_entry(list(ds.left[ds.train_idx]), bank, seed=seed * 10 + t)
            hits = [route(im, bank) == t + 1 for t, ds in enumerate(data)
                    for im in ds.left[ds.test_idx]]
            acc[lam] = float(np.mean(hits))
        checks[f"seed{seed} acc {acc[0.1]:.2f} >= 0.95"] = acc[0.1] >= 0.95
        checks[f"seed{seed} mse-only {acc[0.0]:.2f} <= {acc[0.1]:.2f}"] = acc[0.0] <= acc[0.1]
    verdict(8, checks)


def test_criterion_09_proxy_transfer():
    checks = {}
    for k, (tint, b) in enumerate([((0.4, 0.5, 1.3), -0.1), ((1.4, 0.6, 0.5), 0.05),
                                   ((0.5, 1.4, 0.6), 0.0)]):
        synth = generate_scene(SceneSpec("synthetic", seed=60 + k, height=30, width=40,
                                         pairs=6, test_pairs=2))
        real = generate_scene(SceneSpec("real", tint=tint, brightness=b, seed=70 + k,
                                        height=30, width=40, pairs=6, test_pairs=2))
        real_images = list(real.left) + list(real.right)
        src = scene_color_stats(list(synth.left) + list(synth.right))
        tgt = scene_color_stats(real_images)
        raw = [color_transfer(im, src, tgt, clip=False) for im in synth.left]
        got = scene_color_stats(raw + [color_transfer(im, src, tgt, clip=False)
                                       for im in synth.right])
        gap = max(np.abs(got.mean - tgt.mean).max(), np.abs(got.std - tgt.std).max())
        proxy = build_proxy_dataset(synth, real_images, "real")
        checks[f"scene{k} stats gap {gap:.1e} <= 1e-6"] = gap <= 1e-6
        checks[f"scene{k} disparities identical"] = (
            proxy.disparity.tobytes() == synth.disparity.tobytes())
        checks[f"scene{k} closer in colour"] = (
            mean_color_distance(list(proxy.left), real_images)
            < mean_color_distance(list(synth.left), real_images))
    verdict(9, checks)


def test_criterion_10_reuse_rate(rag_runs):
    conv = CellGenotype.uniform("feature", OperationKind.CONV2D_3X3)
    conv_m = CellGenotype.uniform("matching", OperationKind.CONV3D_3X3X3)

    def ledger(feature_layers, matching_layers, reuse):
        topo = build_base_topology(feature_layers=feature_layers, matching_layers=matching_layers)
        led = GrowthLedger(topo)
        for task, layers in enumerate(reuse, start=1):
            path = []
            for j in range(topo.num_layers):
                if j in layers:
                    path.append(led.paths[task - 1][j])
                else:
                    g = conv if topo.family_of(j) == "feature" else conv_m
                    path.append(led.add_cell(j, g, task))
            led.set_path(task, path)
            led.freeze_task(task)
        return led

    f, m = 9 * (9 * 64 + 8), 9 * (27 * 16 + 4)
    hand = {
        "no reuse": (ledger(5, 0, [(), ()]), 2, 0.0),
        "two of five then three of five": (ledger(5, 0, [(), {0, 1}, {0, 1, 2}]), 3,
                                           (2 / 5 + 3 / 5) / 2),
        "feature reused, matching new": (ledger(1, 1, [(), {0}]), 2, f / (f + m)),
    }
    checks = {name: average_reuse_rate(led, n) == want for name, (led, n, want) in hand.items()}
    arr = rag_runs[0][0].arr
    checks[f"run arr {arr:.3f} in [0, 1]"] = arr is not None and 0.0 <= arr <= 1.0
    verdict(10, checks)


def test_criterion_11_resume(rag_runs, checkpoints):
    full = rag_runs[0][0]
    resumed, _ = run_continual(run_config(0), resume_from=checkpoints / "task_2")
    verdict(11, {"resumed report equals uninterrupted":
                 resumed.comparable() == full.comparable()})
