import numpy as np
import pytest

from elasticnas import space as sp
from elasticnas.data import Dataset, gen_synthetic, split
from elasticnas.errors import ConfigError, DataError, DivergenceError
from elasticnas.supernet import init_supernet
from elasticnas.trainer import (StepRecord, TrainConfig, evaluate, sample_step_archs, train, train_single)

DESK = sp.build_space("desk-tiny")


@pytest.fixture(scope="module")
def small():
    return split(gen_synthetic(10, 40, 16, 0.1, 0), 4, 0.2, 32, 0)


def weights(net):
    return {p: t.data.copy() for p, t in net.params.items()}


def same_weights(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[p], b[p]) for p in a)


# -- config ------------------------------------------------------------------------------

def test_defaults():
    c = TrainConfig()
    assert (c.n_subnets_per_step, c.tau, c.labelled_batch, c.lr0, c.weight_decay) == (4, 0.95, 16, 3e-4, 3e-5)
    assert (c.mu, c.epochs, c.sampling_strategy, c.distill_view) == (4, 30, "spos", "weak")


@pytest.mark.parametrize("kw", [dict(n_subnets_per_step=0), dict(tau=1.5), dict(loss_mode="x"),
                                dict(mu=0), dict(sampling_strategy="greedy"), dict(distill_view="both"),
                                dict(lr0=0.0), dict(labelled_batch=0), dict(max_steps=0)])
def test_bad_config_values(kw):
    with pytest.raises(ConfigError, match="train\\."):
        TrainConfig(**kw)


def test_joint_batch_shifts_labelled_losses(small):
    cfg = dict(loss_mode="fixmatch-single", tau=1.0, seed=5, labelled_batch=8, max_steps=2)
    _, a = train_single(DESK, sp.medium(DESK), small, TrainConfig(joint_bn=True, **cfg))
    _, b = train_single(DESK, sp.medium(DESK), small, TrainConfig(joint_bn=False, **cfg))
    assert a[0].losses["loss_l_A"] != b[0].losses["loss_l_A"]


def test_supervised_allows_mu_zero():
    TrainConfig(loss_mode="supervised-nas", mu=0)


def test_record_round_trip():
    r = StepRecord(3, {"loss_l_A": 1.5}, 0.25, ["w0|d1,1,1|k3.3,3.3,3.3|e2.2,2.2,2.2"], 1e-3)
    assert StepRecord.from_dict(r.to_dict()) == r and r.to_dict()["kind"] == "step"


# -- sampling ----------------------------------------------------------------------------

def test_sampling_examples():
    rng = np.random.default_rng(0)
    assert sample_step_archs(DESK, "spos", 1, rng) == [sp.largest(DESK)]
    assert sample_step_archs(DESK, "sandwich", 2, rng) == [sp.largest(DESK), sp.smallest(DESK)]
    four = sample_step_archs(DESK, "sandwich", 4, rng)
    assert four[:2] == [sp.largest(DESK), sp.smallest(DESK)] and len(four) == 4
    with pytest.raises(ValueError):
        sample_step_archs(DESK, "sandwich", 1, rng)


def test_spos_students_are_uniform():
    # each student position: width x 3 stage depths gives 16 joint cells; 99.9% chi-square bound for 15 dof
    rng = np.random.default_rng(1)
    cells = np.zeros((3, 16))
    for _ in range(10_000):
        archs = sample_step_archs(DESK, "spos", 4, rng)
        assert archs[0] == sp.largest(DESK)
        for pos, a in enumerate(archs[1:]):
            cells[pos, (a.depths[0] - 1) * 8 + (a.depths[1] - 1) * 4 + (a.depths[2] - 1) * 2 + a.width] += 1
    expected = 10_000 / 16
    for row in cells:
        assert ((row - expected) ** 2 / expected).sum() < 37.7


def test_members_restrict_students():
    rng = np.random.default_rng(2)
    members = [sp.smallest(DESK), sp.medium(DESK)]
    pool = {sp.largest(DESK), *members}
    for _ in range(50):
        assert set(sample_step_archs(DESK, "spos", 4, rng, members)) <= pool


# -- reduction identities --------------------------------------------------------------------

@pytest.mark.parametrize("joint", [True, False])
def test_matchnas_teacher_only_equals_fixmatch_single(small, joint):
    cfg = dict(seed=3, labelled_batch=8, mu=2, max_steps=12, lr0=3e-3, tau=0.5, joint_bn=joint)
    net = init_supernet(DESK, 3)
    _, recs_a = train(net, small, TrainConfig(loss_mode="matchnas", n_subnets_per_step=1, **cfg))
    alone, recs_b = train_single(DESK, sp.largest(DESK), small, TrainConfig(loss_mode="fixmatch-single", **cfg))
    assert len(recs_a) == len(recs_b) == 12
    for a, b in zip(recs_a, recs_b):
        assert a.losses.keys() == b.losses.keys() == {"loss_l_A", "loss_u_A"}
        for k in a.losses:
            assert abs(a.losses[k] - b.losses[k]) < 1e-7
        assert a.pass_fraction == b.pass_fraction
    for p, t in alone.params.items():
        assert np.abs(t.data - net.params[p].data).max() < 1e-7


def test_supervised_nas_ignores_unlabelled_pixels(small):
    cfg = TrainConfig(loss_mode="supervised-nas", seed=4, labelled_batch=8, max_steps=8, lr0=3e-3)
    noise = np.random.default_rng(9).random((len(small.indices("unlabelled")),) + small.shape).astype(np.float32)
    a, ra = train(init_supernet(DESK, 4), small, cfg)
    b, rb = train(init_supernet(DESK, 4), small.with_unlabelled(noise), cfg)
    assert same_weights(weights(a), weights(b))
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]
    assert all(r.pass_fraction is None and set(r.losses) <= {"loss_l_A", "loss_l_sub_1", "loss_l_sub_2",
                                                             "loss_l_sub_3"} for r in ra)


def test_fixmatch_single_with_unreachable_threshold_is_supervised(small):
    # exact only with per-view normalization; a joint batch lets unlabelled rows shift the statistics
    cfg = dict(seed=5, labelled_batch=8, max_steps=10, lr0=3e-3, joint_bn=False)
    arch = sp.medium(DESK)
    a, ra = train_single(DESK, arch, small, TrainConfig(loss_mode="fixmatch-single", tau=1.0, **cfg))
    b, rb = train_single(DESK, arch, small, TrainConfig(loss_mode="supervised-single", **cfg))
    assert all(r.losses["loss_u_A"] == 0.0 and r.pass_fraction == 0.0 for r in ra)
    assert [r.losses["loss_l_A"] for r in ra] == [r.losses["loss_l_A"] for r in rb]
    assert same_weights(weights(a), weights(b))


# -- loop behaviour --------------------------------------------------------------------------

def test_replay_determinism_over_200_steps(small):
    cfg = TrainConfig(seed=6, labelled_batch=4, mu=1, max_steps=200, lr0=3e-3)
    a, ra = train(init_supernet(DESK, 6), small, cfg)
    b, rb = train(init_supernet(DESK, 6), small, cfg)
    assert len(ra) == 200
    assert [r.to_dict() for r in ra] == [r.to_dict() for r in rb]
    assert same_weights(weights(a), weights(b))


def test_records_one_per_step_with_teacher_first(small):
    cfg = TrainConfig(seed=7, labelled_batch=8, mu=1, epochs=2, lr0=1e-3)
    _, recs = train(init_supernet(DESK, 7), small, cfg)
    assert len(recs) == 2 * (40 // 8)
    assert [r.step for r in recs] == list(range(10))
    top = sp.encode(sp.largest(DESK))
    for r in recs:
        assert r.archs[0] == top and len(r.archs) == 4
        assert set(r.losses) == {"loss_l_A", "loss_u_A"} | {f"loss_{k}_sub_{i}" for k in "lu" for i in (1, 2, 3)}
        assert 0.0 <= r.pass_fraction <= 1.0
    lrs = [r.lr for r in recs]
    assert lrs[0] == 1e-3 and all(x > y for x, y in zip(lrs, lrs[1:]))


def test_narrowed_training_only_visits_members(small):
    members = [sp.smallest(DESK), sp.medium(DESK)]
    _, recs = train(init_supernet(DESK), small, TrainConfig(labelled_batch=8, mu=1, max_steps=5), members=members)
    allowed = {sp.encode(a) for a in members + [sp.largest(DESK)]}
    assert all(set(r.archs) <= allowed for r in recs)


def test_single_modes_rejected_by_supernet_loop(small):
    with pytest.raises(ConfigError):
        train(init_supernet(DESK), small, TrainConfig(loss_mode="fixmatch-single"))
    with pytest.raises(ConfigError):
        train_single(DESK, sp.largest(DESK), small, TrainConfig(loss_mode="matchnas"))


def test_empty_labelled_split(small):
    tags = small.tags.copy()
    tags[tags == 0] = 1
    with pytest.raises(DataError):
        train(init_supernet(DESK), Dataset(small.images, small.labels, tags, 10), TrainConfig(max_steps=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_the_step(small):
    images = small.images.copy()
    images[small.indices("labelled")] = np.inf
    bad = Dataset(images, small.labels, small.tags, 10)
    with pytest.raises(DivergenceError, match="step 0"):
        train(init_supernet(DESK), bad, TrainConfig(loss_mode="supervised-nas", max_steps=3))


def test_single_training_reduces_loss_and_is_reproducible():
    toy = gen_synthetic(4, 30, 16, 0.05, 8)
    toy = Dataset(toy.images, toy.labels, np.zeros(len(toy), np.uint8), 4)  # every image labelled
    cfg = TrainConfig(loss_mode="supervised-single", seed=8, labelled_batch=8, max_steps=50, lr0=3e-3)
    a, recs = train_single(DESK, sp.smallest(DESK), toy, cfg)
    losses = np.array([r.losses["loss_l_A"] for r in recs])
    assert losses[-10:].mean() < 0.7 * losses[:10].mean()
    # within noise: a 10-step moving average never climbs by more than 10%
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(smooth[1:] <= smooth[:-1] * 1.10)
    b, _ = train_single(DESK, sp.smallest(DESK), toy, cfg)
    assert same_weights(weights(a), weights(b))


# -- evaluation ------------------------------------------------------------------------------

def test_random_network_is_near_chance():
    data = split(gen_synthetic(10, 100, 16, 0.1, 11), 4, 0.5, 64, 11)
    accs = [evaluate(init_supernet(DESK, s), sp.medium(DESK), data) for s in range(8)]
    assert abs(np.mean(accs) - 0.10) <= 0.03


def test_evaluate_is_deterministic_and_rejects_empty(small):
    net = init_supernet(DESK)
    a = evaluate(net, sp.medium(DESK), small)
    assert a == evaluate(net, sp.medium(DESK), small)
    with pytest.raises(DataError):
        evaluate(net, sp.medium(DESK), (np.zeros((0, 3, 16, 16), np.float32), np.zeros(0, int)))


def test_separable_two_class_problem_is_learned():
    data = split(gen_synthetic(2, 120, 16, 0.05, 12), 20, 0.25, 32, 12)
    net, _ = train_single(DESK, sp.medium(DESK), data,
                          TrainConfig(loss_mode="supervised-single", labelled_batch=8, epochs=15, lr0=3e-3))
    assert evaluate(net, sp.medium(DESK), data) >= 0.95


def test_recalibrated_eval_close_to_batch_statistics(small):
    net, _ = train(init_supernet(DESK, 1), small,
                   TrainConfig(loss_mode="supervised-nas", labelled_batch=8, epochs=20, lr0=3e-3, seed=1))
    data = split(gen_synthetic(10, 100, 16, 0.1, 0), 4, 0.5, 256, 0)
    x, y = data.part("test")
    for arch in (sp.smallest(DESK), sp.largest(DESK)):
        recal = evaluate(net, arch, data)
        batch_mode = float((net.forward(arch, x).data.argmax(1) == y).mean())
        assert abs(recal - batch_mode) <= 0.02
