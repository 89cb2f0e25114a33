import itertools
import math
import re

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from elasticnas import space as sp
from elasticnas.errors import DecodeError, SpaceValidationError

from oracles import brute_force_count, walk_resources

DESK = sp.build_space("desk-tiny")
LARGE = sp.build_space("mbv3-large")
SMALL = sp.build_space("mbv3-small")


def stage_choices(space):
    return [(s.depths, s.kernels, s.expands) for s in space.stages]


def latex_number(text):
    """'4\\times10^{19}' -> 4e19."""
    m = re.fullmatch(r"(\d+(?:\.\d+)?)\\times10\^\{(\d+)\}", text)
    return float(m.group(1)) * 10 ** int(m.group(2))


def rounds_to(value, quoted):
    mant, exp = quoted
    return round(value / 10 ** exp) == mant


# -- counting ----------------------------------------------------------------------------

def test_large_count_exact():
    assert sp.count_subnets(LARGE) == 2 * 7371 ** 5 == 43_517_310_985_144_971_702
    assert 7371 == (3 * 3) ** 2 + (3 * 3) ** 3 + (3 * 3) ** 4


def test_large_count_matches_quoted_magnitude():
    n = sp.count_subnets(LARGE)
    assert latex_number(r"4\times10^{19}") == 4e19
    assert rounds_to(n, (4, 19))


def test_small_count_matches_quoted_magnitude():
    n = sp.count_subnets(SMALL)
    assert n == 3 * 1548 ** 4
    assert 1548 == 6 ** 2 + 6 ** 3 + 6 ** 4
    # "about 1e13" is an order-of-magnitude statement; 1.7e13 shares the decade
    assert math.floor(math.log10(n)) == 13 == round(math.log10(latex_number(r"1\times10^{13}")))


def test_desk_count_equals_brute_force_and_enumeration(frozen):
    n = sp.count_subnets(DESK)
    assert n == 16000 == frozen["desk_tiny_count"]
    assert n == brute_force_count(stage_choices(DESK), DESK.n_widths)
    archs = list(sp.enumerate_archs(DESK))
    assert len(archs) == n
    assert len({sp.encode(a) for a in archs}) == n
    assert all(sp.is_valid(DESK, a) for a in archs)


def test_degenerate_space_has_one_member():
    one = sp.build_space([{"depths": [1], "widths": [8], "expands": [2], "kernels": [3]}], resolution=8)
    assert sp.count_subnets(one) == 1
    assert list(sp.enumerate_archs(one)) == [sp.largest(one)] == [sp.smallest(one)]


@pytest.mark.parametrize("depths,kernels,expands,widths", [
    ((1, 2), (3,), (2, 3), 1), ((1, 3), (3, 5), (2,), 2), ((2,), (3, 5, 7), (1, 2), 3)])
def test_small_custom_spaces_match_brute_force(depths, kernels, expands, widths):
    stage = {"depths": depths, "widths": tuple(8 * (i + 1) for i in range(widths)), "expands": expands,
             "kernels": kernels}
    space = sp.build_space([stage, {**stage, "stride": 2}], resolution=8)
    n = sp.count_subnets(space)
    assert n == brute_force_count(stage_choices(space), widths) == sum(1 for _ in sp.enumerate_archs(space))


# -- largest / smallest / sampling -------------------------------------------------------------

def summary(space, arch):
    """Collapse a uniform arch into the {D, W, E, K} notation."""
    assert len({d for d in arch.depths}) == 1
    ks = {k for i, ks in enumerate(arch.kernels) for k in ks[:arch.depths[i]]}
    es = {e for i, es in enumerate(arch.expands) for e in es[:arch.depths[i]]}
    assert len(ks) == len(es) == 1
    return {"D": arch.depths[0], "W": space.width_labels[arch.width], "E": es.pop(), "K": ks.pop()}


def test_largest_and_smallest_of_large_space():
    assert summary(LARGE, sp.largest(LARGE)) == {"D": 4, "W": "1.0x", "E": 6, "K": 7}
    assert summary(LARGE, sp.smallest(LARGE)) == {"D": 2, "W": "0.5x", "E": 3, "K": 3}


def test_largest_of_small_space():
    assert summary(SMALL, sp.largest(SMALL)) == {"D": 4, "W": "1.5x", "E": 6, "K": 5}
    assert len(SMALL.stages) == 4 and SMALL.n_widths == 3


def test_named_space_shapes():
    assert len(LARGE.stages) == 5 and LARGE.n_widths == 2
    for s in LARGE.stages:
        assert (s.depths, s.expands, s.kernels) == ((2, 3, 4), (3, 4, 6), (3, 5, 7))
    assert len(DESK.stages) == 3 and DESK.resolution == 16
    for s in DESK.stages:
        assert (s.depths, s.kernels, s.expands, s.widths) == ((1, 2), (3, 5), (2, 4), (8, 16))


def within_3_sigma(counts, n):
    p = 1.0 / len(counts)
    sigma = math.sqrt(n * p * (1 - p))
    return all(abs(c - n * p) <= 3 * sigma for c in counts)


def test_uniform_sampling_frequencies():
    rng = np.random.default_rng(7)
    n = 10_000
    draws = [sp.sample_uniform(DESK, rng) for _ in range(n)]
    assert within_3_sigma(np.bincount([a.width for a in draws], minlength=2), n)
    for i, s in enumerate(DESK.stages):
        assert within_3_sigma([sum(a.depths[i] == d for a in draws) for d in s.depths], n)
        for j in range(s.max_depth):
            assert within_3_sigma([sum(a.kernels[i][j] == k for a in draws) for k in s.kernels], n)
            assert within_3_sigma([sum(a.expands[i][j] == e for a in draws) for e in s.expands], n)


def test_uniform_sampling_chi_square_on_stage_depth_pairs():
    # joint (depth0, depth1, depth2, width): 16 cells, chi-square 99.9% critical value for 15 dof is 37.7
    rng = np.random.default_rng(11)
    n = 10_000
    cells = np.zeros(16)
    for _ in range(n):
        a = sp.sample_uniform(DESK, rng)
        cells[(a.depths[0] - 1) * 8 + (a.depths[1] - 1) * 4 + (a.depths[2] - 1) * 2 + a.width] += 1
    chi2 = float(((cells - n / 16) ** 2 / (n / 16)).sum())
    assert chi2 < 37.7


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(sorted(sp.NAMED_SPACES)))
def test_samples_and_extremes_validate(seed, name):
    space = sp.build_space(name)
    sp.validate_arch(space, sp.sample_uniform(space, np.random.default_rng(seed)))
    sp.validate_arch(space, sp.largest(space))
    sp.validate_arch(space, sp.smallest(space))
    sp.validate_arch(space, sp.medium(space))


# -- resources --------------------------------------------------------------------------------

def test_single_conv_flops_closed_form():
    assert sp.conv_flops(1, 1, 3, 8, 8) == 2 * 64 * 9 == 1152


def test_resources_match_walk_oracle(frozen):
    for code, want in frozen["desk_tiny_resources"].items():
        r = sp.count_resources(DESK, sp.decode(code, DESK))
        assert (r.flops, r.params) == (want["flops"], want["params"])
    for code, want in frozen["mbv3_large_resources"].items():
        r = sp.count_resources(LARGE, sp.decode(code, LARGE))
        assert (r.flops, r.params) == (want["flops"], want["params"])


def test_resources_match_live_walk_on_random_archs():
    rng = np.random.default_rng(3)
    for name in ("desk-tiny", "mbv3-small", "proxyless"):
        space = sp.build_space(name)
        for _ in range(5):
            a = sp.sample_uniform(space, rng)
            r = sp.count_resources(space, a)
            assert (r.flops, r.params) == walk_resources(space, a)


def test_largest_costs_more_than_smallest():
    big, small = sp.count_resources(DESK, sp.largest(DESK)), sp.count_resources(DESK, sp.smallest(DESK))
    assert big.flops > small.flops > 0 and big.params > small.params > 0


def enlargements(space, arch):
    """Every arch that differs from ``arch`` by raising exactly one choice one notch."""
    def nxt(choices, v):
        bigger = sorted(c for c in choices if c > v)
        return bigger[0] if bigger else None

    if arch.width + 1 < space.n_widths:
        yield sp.ArchConfig(arch.width + 1, arch.depths, arch.kernels, arch.expands)
    for i, s in enumerate(space.stages):
        d = nxt(s.depths, arch.depths[i])
        if d is not None:
            yield sp.ArchConfig(arch.width, arch.depths[:i] + (d,) + arch.depths[i + 1:], arch.kernels, arch.expands)
        for j in range(s.max_depth):
            for field, choices in (("kernels", s.kernels), ("expands", s.expands)):
                grid = getattr(arch, field)
                v = nxt(choices, grid[i][j])
                if v is None:
                    continue
                row = grid[i][:j] + (v,) + grid[i][j + 1:]
                new = grid[:i] + (row,) + grid[i + 1:]
                yield sp.ArchConfig(**{**arch.__dict__, field: new})


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["desk-tiny", "mbv3-large", "mbv3-small"]))
def test_resources_monotone_in_every_choice(seed, name):
    space = sp.build_space(name)
    a = sp.sample_uniform(space, np.random.default_rng(seed))
    base = sp.count_resources(space, a)
    for b in enlargements(space, a):
        r = sp.count_resources(space, b)
        assert r.flops >= base.flops and r.params >= base.params


def test_invalid_arch_rejected_by_counter():
    bad = sp.ArchConfig(5, *[getattr(sp.largest(DESK), f) for f in ("depths", "kernels", "expands")])
    with pytest.raises(SpaceValidationError):
        sp.count_resources(DESK, bad)


def test_latency_proxy_is_linear_in_flops(tmp_path):
    path = tmp_path / "lat.txt"
    path.write_text("# ms per GFLOP\na = 2.5\nb = 0.5\n")
    model = sp.LatencyModel.load(path)
    assert model(2_000_000_000) == pytest.approx(5.5)
    r = sp.count_resources(DESK, sp.largest(DESK), latency=model)
    assert r.latency_proxy == pytest.approx(2.5 * r.flops / 1e9 + 0.5)


# -- encoding ----------------------------------------------------------------------------------

def test_encoding_format():
    assert sp.encode(sp.smallest(DESK)) == "w0|d1,1,1|k3.3,3.3,3.3|e2.2,2.2,2.2"


@pytest.mark.parametrize("name", sorted(sp.NAMED_SPACES))
def test_round_trip_extremes(name):
    space = sp.build_space(name)
    for a in (sp.largest(space), sp.smallest(space), sp.medium(space)):
        assert sp.decode(sp.encode(a), space) == a


def test_round_trip_thousand_random_configs():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a = sp.sample_uniform(LARGE, rng)
        assert sp.decode(sp.encode(a), LARGE) == a


def test_encoding_has_no_collisions():
    rng = np.random.default_rng(9)
    seen = {}
    while len(seen) < 100_000:
        a = sp.sample_uniform(LARGE, rng)
        seen[a] = sp.encode(a)
    assert len(set(seen.values())) == len(seen)


@pytest.mark.parametrize("text", [
    "w0|d1,1,1|k4.3,3.3,3.3|e2.2,2.2,2.2",  # kernel 4
    "w2|d1,1,1|k3.3,3.3,3.3|e2.2,2.2,2.2",  # width index
    "w0|d3,1,1|k3.3,3.3,3.3|e2.2,2.2,2.2",  # depth
    "w0|d1,1|k3.3,3.3|e2.2,2.2",  # stage count
    "w0|d1,1,1|k3,3,3|e2,2,2",  # per-block count
    "w0|d1,1,1|k3.x,3.3,3.3|e2.2,2.2,2.2",
    "w0|d1,1,1|e2.2,2.2,2.2",
    "",
])
def test_decode_rejects_bad_strings(text):
    with pytest.raises(DecodeError):
        sp.decode(text, DESK)


# -- space files & validation ------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(sp.NAMED_SPACES))
def test_space_text_round_trip(name):
    space = sp.build_space(name)
    assert sp.space_from_text(sp.space_to_text(space)) == space


def test_even_kernel_rejected():
    with pytest.raises(SpaceValidationError):
        sp.build_space([{"depths": [1], "widths": [8], "expands": [2], "kernels": [4]}], resolution=8)


def test_mismatched_width_sets_rejected():
    with pytest.raises(SpaceValidationError):
        sp.build_space([{"depths": [1], "widths": [8, 16], "expands": [2], "kernels": [3]},
                        {"depths": [1], "widths": [8], "expands": [2], "kernels": [3]}], resolution=8)


def test_nesting_relation():
    assert sp.is_nested(sp.smallest(DESK), sp.largest(DESK))
    assert not sp.is_nested(sp.largest(DESK), sp.smallest(DESK))
    for a, b in itertools.product([sp.smallest(DESK), sp.medium(DESK)], repeat=2):
        assert sp.is_nested(a, a) and sp.is_nested(b, b)
