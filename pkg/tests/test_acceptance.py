"""Acceptance criteria 1-11, each printing one PASS/FAIL line.

Criteria 7-10 share one desk-scale Runner (configs/desk.conf) so the baseline
MatchNAS cells train once; expect roughly an hour on a single core.
"""

import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from elasticnas import experiments as ex
from elasticnas import harness as hz
from elasticnas import space as sp
from elasticnas.data import gen_synthetic, split
from elasticnas.optim import OptimState, optimizer_step
from elasticnas.ssl import pseudo_label
from elasticnas.supernet import init_supernet, train_step_grads
from elasticnas.tensor import (Tensor, conv2d, cross_entropy_from_logits, global_avg_pool, hardswish, linear,
                               normalize_batch, relu)
from elasticnas.trainer import TrainConfig, train, train_single
from elasticnas.zeroshot import ZenScorer, flops_budgets, zero_shot_search

from oracles import brute_force_count, numeric_grad, rel_error

ROOT = Path(__file__).resolve().parents[1]
DESK = sp.build_space("desk-tiny")


def archs(k, seed):
    rng = np.random.default_rng(seed)
    return [sp.sample_uniform(DESK, rng) for _ in range(k)]


def meet(a, b):
    return sp.ArchConfig(
        min(a.width, b.width),
        tuple(map(min, a.depths, b.depths)),
        tuple(tuple(map(min, r, s)) for r, s in zip(a.kernels, b.kernels)),
        tuple(tuple(map(min, r, s)) for r, s in zip(a.expands, b.expands)))


# -- 1 -----------------------------------------------------------------------------------------

def test_criterion_1_weight_sharing(verdict):
    start = time.perf_counter()
    net = init_supernet(DESK, 1)
    x = np.random.default_rng(0).random((6, 3, 16, 16)).astype(np.float32)
    worst = 0.0
    for a in archs(8, 1) + [sp.largest(DESK), sp.smallest(DESK)]:
        worst = max(worst, float(np.abs(net.extract_standalone(a).forward(x).data - net.forward(a, x).data).max()))

    shapes = net.shapes()
    local = True
    state = OptimState(lr0=1e-2, weight_decay=1e-2)
    y = np.arange(6) % 10
    for a in archs(4, 2):
        before = net.params.snapshot()
        net.params.zero_grad()
        train_step_grads(net, [a], [cross_entropy_from_logits(net.forward(a, x), y)])
        optimizer_step(net.params, state)
        net.mark_updated()
        cover = net.slice_view(a).covered(shapes)
        local &= all(np.array_equal(t.data[~cover[p]], before[p][~cover[p]]) for p, t in net.params.items())

    nested = 0
    for a, b in zip(archs(100, 3), archs(100, 4)):
        small = meet(a, b)
        ca, cb = net.slice_view(small).covered(shapes), net.slice_view(b).covered(shapes)
        nested += sp.is_nested(small, b) and all(not (ca[p] & ~cb[p]).any() for p in shapes)
    secs = time.perf_counter() - start
    verdict(1, worst < 1e-5 and local and nested == 100 and secs < 60,
            f"extraction max err {worst:.2e}; locality bitwise {local}; nested {nested}/100; {secs:.1f}s")


# -- 2 -----------------------------------------------------------------------------------------

def _fd(build, *tensors):
    probe = np.random.default_rng(9).standard_normal(build().shape)
    for t in tensors:
        t.zero_grad()
    (build() * Tensor(probe)).sum().backward()
    return max(rel_error(t.grad, numeric_grad(lambda: float((build().data * probe).sum()), t.data))
               for t in tensors)


def test_criterion_2_gradients(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)

    def t(a):
        return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)

    errs = {}
    x = t(rng.standard_normal((2, 3, 6, 6)))
    w = t(rng.standard_normal((4, 3, 3, 3)))
    errs["conv"] = _fd(lambda: conv2d(x, w, 2, 1), x, w)
    wd = t(rng.standard_normal((3, 1, 5, 5)))
    errs["depthwise"] = _fd(lambda: conv2d(x, wd, 1, 2, 3), x, wd)
    g, b = t(rng.uniform(0.5, 1.5, 3)), t(rng.standard_normal(3))
    errs["norm"] = _fd(lambda: normalize_batch(x, g, b, "train"), x, g, b)
    a = rng.uniform(-5, 5, (2, 3, 4, 4))
    a[np.abs(np.abs(a) - 3) < 0.05] += 0.2
    a[np.abs(a) < 0.05] += 0.2
    xa = t(a)
    errs["hardswish"] = _fd(lambda: hardswish(xa), xa)
    errs["relu"] = _fd(lambda: relu(xa), xa)
    wl, bl = t(rng.standard_normal((5, 3))), t(rng.standard_normal(5))
    errs["pool+linear"] = _fd(lambda: linear(global_avg_pool(x), wl, bl), x, wl, bl)
    logits = t(rng.standard_normal((4, 5)))
    labels = np.array([0, 3, 1, 4])
    errs["cross-entropy"] = _fd(lambda: cross_entropy_from_logits(logits, labels), logits)

    hid = 6
    we = t(rng.standard_normal((hid, 3, 1, 1)) * 0.5)
    wdb = t(rng.standard_normal((hid, 1, 5, 5)) * 0.3)
    wp = t(rng.standard_normal((3, hid, 1, 1)) * 0.5)
    norms = [(t(rng.uniform(0.5, 1.5, c)), t(rng.standard_normal(c) * 0.1)) for c in (hid, hid, 3)]

    def block():
        h = hardswish(normalize_batch(conv2d(x, we), *norms[0]))
        h = hardswish(normalize_batch(conv2d(h, wdb, 1, 2, hid), *norms[1]))
        return normalize_batch(conv2d(h, wp), *norms[2]) + x

    errs["mbconv block"] = _fd(block, x, we, wdb, wp, *[p for pair in norms for p in pair])
    secs = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    verdict(2, errs[worst] < 1e-5 and secs < 120,
            f"{len(errs)} checks, worst {worst} rel err {errs[worst]:.2e}; {secs:.1f}s")


# -- 3 -----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    return split(gen_synthetic(10, 12, 16, 0.1, 0), 3, 0.25, 10, 0)


def test_criterion_3_loss_reductions(verdict, small_data):
    start = time.perf_counter()
    cfg = dict(seed=3, labelled_batch=8, mu=2, max_steps=12, lr0=3e-3, tau=0.5)
    net = init_supernet(DESK, 3)
    _, ra = train(net, small_data, TrainConfig(loss_mode="matchnas", n_subnets_per_step=1, **cfg))
    alone, rb = train_single(DESK, sp.largest(DESK), small_data, TrainConfig(loss_mode="fixmatch-single", **cfg))
    step_gap = max(abs(a.losses[k] - b.losses[k]) for a, b in zip(ra, rb) for k in a.losses)
    weight_gap = max(float(np.abs(t.data - net.params[p].data).max()) for p, t in alone.params.items())
    reduce_ok = len(ra) == len(rb) == 12 and step_gap < 1e-7 and weight_gap < 1e-7

    sup = TrainConfig(loss_mode="supervised-nas", seed=4, labelled_batch=8, max_steps=8, lr0=3e-3)
    noise = np.random.default_rng(9).random((len(small_data.indices("unlabelled")),) + small_data.shape)
    na, _ = train(init_supernet(DESK, 4), small_data, sup)
    nb, _ = train(init_supernet(DESK, 4), small_data.with_unlabelled(noise.astype(np.float32)), sup)
    independent = all(np.array_equal(na.params[p].data, nb.params[p].data) for p in na.params)

    rng = np.random.default_rng(12)
    taus = np.linspace(0, 1, 11)
    all_true = monotone = True
    for _ in range(1000):
        z = rng.standard_normal((int(rng.integers(1, 20)), int(rng.integers(2, 12)))) * rng.uniform(0.1, 10)
        masks = [pseudo_label(z, tau).mask for tau in taus]
        all_true &= bool(masks[0].all())
        monotone &= all(not (hi & ~lo).any() for lo, hi in zip(masks, masks[1:]))
    secs = time.perf_counter() - start
    verdict(3, reduce_ok and independent and all_true and monotone and secs < 60,
            f"n=1 step gap {step_gap:.1e}, weight gap {weight_gap:.1e}; unlabelled-independent {independent}; "
            f"tau=0 all-true {all_true}; monotone over 1000 batches {monotone}; {secs:.1f}s")


# -- 4 -----------------------------------------------------------------------------------------

def test_criterion_4_cardinality(verdict):
    large = sp.count_subnets(sp.build_space("mbv3-large"))
    small = sp.count_subnets(sp.build_space("mbv3-small"))
    desk = sp.count_subnets(DESK)
    enumerated = sum(1 for _ in sp.enumerate_archs(DESK))
    brute = brute_force_count([(s.depths, s.kernels, s.expands) for s in DESK.stages], DESK.n_widths)
    large_ok = large == 2 * 7371 ** 5 and f"{large:.0e}" == "4e+19"
    # "about 1e13" is read as the same decade: 1.7e13 rounds to 2e13 at one figure
    small_ok = 1e13 <= small < 1e14
    verdict(4, large_ok and small_ok and desk == enumerated == brute,
            f"mbv3-large {large} ({large:.2e}); mbv3-small {small} ({small:.2e}); "
            f"desk-tiny {desk} = enumeration {enumerated} = brute force {brute}")


# -- 5 -----------------------------------------------------------------------------------------

def test_criterion_5_zero_shot_oracle(verdict):
    start = time.perf_counter()
    # one repeat on two images keeps 16000 scores inside the time limit
    scorer = ZenScorer(seed=0, repeats=1, batch=2)
    cs = flops_budgets(DESK, 8)
    got = zero_shot_search(DESK, scorer, cs, exhaustive=True)
    resources = {a: sp.count_resources(DESK, a) for a in sp.enumerate_archs(DESK)}
    agree = feasible = 0
    for cand, budget in zip(got, cs):
        best = min((a for a, r in resources.items() if r.flops <= budget.limit),
                   key=lambda a: (-scorer(DESK, a), resources[a].flops, sp.encode(a)))
        agree += cand.arch == best
        feasible += resources[cand.arch].flops <= budget.limit
    fresh = ZenScorer(seed=0, repeats=1, batch=2)
    stable = all(fresh(DESK, c.arch) == c.score for c in got)
    secs = time.perf_counter() - start
    verdict(5, agree == feasible == 8 and stable and secs < 300,
            f"argmax agreement {agree}/8, feasible {feasible}/8, rescoring stable {stable}; {secs:.1f}s")


# -- 6 -----------------------------------------------------------------------------------------

def test_criterion_6_scorer_sanity(verdict):
    start = time.perf_counter()
    wins = sum(ZenScorer(seed=s)(DESK, sp.largest(DESK)) > ZenScorer(seed=s)(DESK, sp.smallest(DESK))
               for s in range(20))
    secs = time.perf_counter() - start
    verdict(6, wins >= 18 and secs < 300, f"largest beats smallest in {wins}/20 seeds; {secs:.1f}s")


# -- 7-10: desk-scale training -------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_runner():
    return hz.Runner(hz.load_config(ROOT / "configs" / "desk.conf"))


def _means(res):
    return {k: float(np.mean(v)) for k, v in res.items()}


def _fmt(res):
    return "; ".join(f"{k} {np.mean(v):.4f} [{', '.join(f'{x:.3f}' for x in v)}]" for k, v in res.items())


@pytest.mark.slow
def test_criterion_7_method_ordering(verdict, desk_runner):
    start = time.perf_counter()
    res = ex.method_ordering(desk_runner)
    m = _means(res)
    gap = m["matchnas"] - m["spos+fixmatch"]
    secs = time.perf_counter() - start
    verdict(7, m["matchnas"] > m["spos+fixmatch"] > m["spos"] and gap >= 0.02,
            f"smallest-subnet mean: {_fmt(res)}; MatchNAS margin {100 * gap:.1f} points; {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_threshold(verdict, desk_runner):
    start = time.perf_counter()
    res = ex.threshold_ablation(desk_runner, (0.95, 0.0))
    m = _means(res)
    secs = time.perf_counter() - start
    verdict(8, m[0.95] >= m[0.0], f"tau {_fmt(res)}; {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_9_distill_view(verdict, desk_runner):
    start = time.perf_counter()
    res = ex.distill_view_ablation(desk_runner)
    m = _means(res)
    secs = time.perf_counter() - start
    verdict(9, m["weak"] >= m["strong"], f"view {_fmt(res)}; {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_10_narrowing(verdict, desk_runner):
    start = time.perf_counter()
    res = ex.narrowing_ablation(desk_runner)
    m = _means(res)
    distinct = len({c.arch for c in desk_runner.narrowed(0)})
    secs = time.perf_counter() - start
    verdict(10, m["narrowed"] >= m["full"], f"mean over {distinct} members: {_fmt(res)}; {secs / 60:.1f} min")


# -- 11 ----------------------------------------------------------------------------------------

def test_criterion_11_pipeline_determinism(verdict, tmp_path):
    cfg = hz.load_config(ROOT / "configs" / "smoke.conf")
    hz.compare_protocol(cfg, tmp_path / "a")
    hz.compare_protocol(cfg, tmp_path / "b")
    a, b = ((tmp_path / d / "summary.csv").read_bytes() for d in "ab")
    verdict(11, a == b and len(a.splitlines()) == 1 + len(cfg.methods) * 3 * len(cfg.seeds),
            f"two compare runs, {len(a.splitlines()) - 1} rows, byte-identical {a == b}")
