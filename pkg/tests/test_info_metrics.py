import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elmpc.info_metrics import (
    DiscretizationScheme,
    EmptyDistributionError,
    NotReadyError,
    SampleTriple,
    TripleHistogram,
    batch_recompute_oracle,
    compute_metrics,
    discretize,
    entropy,
)

from conftest import fill, np_metrics

TOL = 1e-9


# ---------------------------------------------------------------- discretization


def test_interior_value_maps_past_outer_low_bin():
    sch = DiscretizationScheme([[0, 1, 2, 3]])
    assert discretize([1.5], sch) == 2


def test_far_low_value_lands_in_outer_low_bin():
    sch = DiscretizationScheme([[0, 1, 2, 3]])
    assert discretize([-7.0], sch) == 0


def test_row_major_composite_symbol():
    sch = DiscretizationScheme([[0, 1, 2, 3, 4], [0, 1, 2, 3, 4]])
    assert sch.bin_counts == [6, 6]
    # indices (2, 3) with 6 bins per dimension
    assert discretize([1.5, 2.5], sch) == 2 * 6 + 3
    sch5 = DiscretizationScheme([[0, 1, 2, 3], [0, 1, 2, 3]])
    assert sch5.bin_counts == [5, 5]
    assert discretize([1.5, 2.5], sch5) == 2 * 5 + 3
    assert sch5.unravel(13) == (2, 3)


def test_bin_boundaries_left_closed_and_top_edge_inside():
    sch = DiscretizationScheme([[0, 1, 2, 3]])
    assert discretize([0.0], sch) == 1
    assert discretize([1.0], sch) == 2
    assert discretize([3.0], sch) == 3  # top edge stays in last interior bin
    assert discretize([3.0000001], sch) == 4


def test_discretize_rejects_bad_input():
    sch = DiscretizationScheme([[0, 1]])
    with pytest.raises(ValueError):
        discretize([math.nan], sch)
    with pytest.raises(ValueError):
        discretize([0.5, 0.5], sch)
    with pytest.raises(ValueError):
        DiscretizationScheme([[0, 0, 1]])


def test_scheme_round_trip():
    sch = DiscretizationScheme.uniform([(0, 1, 4), (-2, 2, 3)])
    assert DiscretizationScheme.from_dict(sch.to_dict()) == sch
    assert sch.n_symbols == 6 * 5


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_symbol_in_range_and_unravels(x, y):
    sch = DiscretizationScheme.uniform([(-10, 10, 7), (0, 5, 3)])
    sym = discretize([x, y], sch)
    assert 0 <= sym < sch.n_symbols
    i, j = sch.unravel(sym)
    assert i == sch.bin_index(0, x) and j == sch.bin_index(1, y)


# ---------------------------------------------------------------- entropy


def test_entropy_examples():
    assert entropy({"a": 1, "b": 1, "c": 1, "d": 1}, 4) == pytest.approx(2.0, abs=1e-12)
    assert entropy({"a": 4}, 4) == 0.0
    # oracle: -0.75 log2 0.75 - 0.25 log2 0.25
    assert entropy({"a": 3, "b": 1}, 4) == pytest.approx(0.8112781244591328, abs=1e-6)


def test_entropy_of_nothing_is_an_error():
    with pytest.raises(EmptyDistributionError):
        entropy({}, 0)


# ---------------------------------------------------------------- histogram


def test_first_push_counts():
    h = TripleHistogram(8, 8, window=10, n_min=1)
    h.push(SampleTriple(1, 2, 3))
    assert h.n == 1
    k = h.keys(1, 2, 3)
    assert h.counts("sas") == {k[0]: 1}
    assert h.counts("s") == {1: 1}


def test_fifo_eviction():
    h = TripleHistogram(8, 8, window=2, n_min=1)
    h.push(SampleTriple(1, 1, 1))
    h.push(SampleTriple(2, 2, 2))
    ev = h.push(SampleTriple(3, 3, 3))
    assert ev[:3] == (1, 1, 1)
    assert h.n == 2
    joint = h.counts("sas")
    assert h.keys(1, 1, 1)[0] not in joint
    assert joint[h.keys(3, 3, 3)[0]] == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3), st.integers(0, 5)), min_size=1, max_size=60),
       st.integers(1, 40))
def test_marginals_are_projections_of_joint(triples, window):
    h = TripleHistogram(6, 4, window=window, n_min=1)
    for t in triples:
        h.push(SampleTriple(*t))
    kept = triples[-window:]
    expect = {
        "s": {}, "a": {}, "sn": {},
    }
    for s, a, sn in kept:
        expect["s"][s] = expect["s"].get(s, 0) + 1
        expect["a"][a] = expect["a"].get(a, 0) + 1
        expect["sn"][sn] = expect["sn"].get(sn, 0) + 1
    for name in ("s", "a", "sn"):
        assert h.counts(name) == expect[name]
    # every marginal table sums to n and matches a projection of the joint
    sa = {}
    for key, c in h.counts("sas").items():
        sa[key // h.n_s] = sa.get(key // h.n_s, 0) + c
    assert sa == h.counts("sa")
    assert all(sum(h.counts(n).values()) == h.n for n in ("sas", "sa", "as", "ss", "s", "a", "sn"))


def test_histogram_json_round_trip(rng):
    h = fill(TripleHistogram(10, 5, window=50, n_min=5), *(rng.integers(0, 5, 80) for _ in range(3)))
    h2 = TripleHistogram.from_dict(h.to_dict())
    assert all(h2.counts(n) == h.counts(n) for n in ("sas", "sa", "as", "ss", "s", "a", "sn"))
    assert compute_metrics(h2).psi == pytest.approx(compute_metrics(h).psi, abs=TOL)


# ---------------------------------------------------------------- metrics


def test_deterministic_map_gives_two_bits():
    s, a = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    s, a = s.ravel(), a.ravel()
    h = fill(TripleHistogram(4, 4, window=16, n_min=16), s, a, (s + a) % 4)
    m = compute_metrics(h)
    assert m.psi == pytest.approx(2.0, abs=TOL)
    assert m.h_s_next == pytest.approx(2.0, abs=TOL)


def test_independent_uniform_has_small_psi(rng):
    s, a, sn = (rng.integers(0, 8, 5000) for _ in range(3))
    m = compute_metrics(fill(TripleHistogram(8, 8, window=5000), s, a, sn))
    assert 0 <= m.psi <= 0.15


def test_identity_map_memory_equals_entropy_of_s(rng):
    s = np.repeat(np.arange(6), 4)
    a = np.tile(np.arange(4), 6)
    m = compute_metrics(fill(TripleHistogram(6, 4, window=24, n_min=1), s, a, s))
    assert m.memory == pytest.approx(m.h_s, abs=TOL)
    assert m.psi == pytest.approx(m.memory, abs=TOL)


def test_not_ready_below_minimum():
    h = TripleHistogram(4, 4, window=100, n_min=10)
    with pytest.raises(NotReadyError):
        compute_metrics(h)
    with pytest.raises(NotReadyError):
        batch_recompute_oracle(h)
    for i in range(9):
        h.push(SampleTriple(i % 4, 0, 0))
    with pytest.raises(NotReadyError):
        compute_metrics(h)


def test_constant_triple_has_zero_metrics():
    h = TripleHistogram(4, 4, window=30, n_min=1)
    for _ in range(30):
        h.push(SampleTriple(2, 1, 3))
    m = batch_recompute_oracle(h)
    assert m.psi == 0 and m.memory == 0
    assert compute_metrics(h).psi == pytest.approx(0.0, abs=TOL)


def test_incremental_matches_numpy_reference(rng):
    n, w = 3000, 700
    s, a, sn = rng.integers(0, 12, n), rng.integers(0, 5, n), rng.integers(0, 12, n)
    sn = np.where(rng.random(n) < 0.6, (s + a) % 12, sn)
    h = TripleHistogram(12, 5, window=w, n_min=1)
    for i in range(n):
        h.push(SampleTriple(int(s[i]), int(a[i]), int(sn[i])))
        if i % 250 == 249:
            lo = max(0, i + 1 - w)
            ref = np_metrics(s[lo:i + 1], a[lo:i + 1], sn[lo:i + 1])
            m = compute_metrics(h)
            for key, val in ref.items():
                assert getattr(m, key) == pytest.approx(val, abs=TOL)


def test_eviction_equivalence(rng):
    w = 200
    h = fill(TripleHistogram(10, 10, window=w, n_min=1), *(rng.integers(0, 10, w) for _ in range(3)))
    for _ in range(w):
        h.push(SampleTriple(4, 2, 7))
    fresh = TripleHistogram(10, 10, window=w, n_min=1)
    for _ in range(w):
        fresh.push(SampleTriple(4, 2, 7))
    assert compute_metrics(h).psi == pytest.approx(compute_metrics(fresh).psi, abs=TOL)
    assert h.counts("sas") == fresh.counts("sas")


def test_shuffling_next_state_lowers_psi():
    for seed in range(20):
        r = np.random.default_rng(seed)
        s, a = r.integers(0, 4, 5000), r.integers(0, 4, 5000)
        sn = (s + a) % 4
        dep = compute_metrics(fill(TripleHistogram(4, 4, window=5000), s, a, sn)).psi
        shuf = compute_metrics(fill(TripleHistogram(4, 4, window=5000), s, a, r.permutation(sn))).psi
        assert shuf < dep


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 2), st.integers(0, 6)), min_size=1, max_size=120),
       st.integers(1, 50))
def test_identities_hold_for_any_history(triples, window):
    h = TripleHistogram(7, 3, window=window, n_min=1)
    for t in triples:
        h.push(SampleTriple(*t))
    m = compute_metrics(h)
    assert m.psi >= -TOL and m.memory >= -TOL
    assert m.psi >= m.memory - TOL
    assert m.psi <= min(m.h_sa, m.h_s_next) + TOL
    distinct = len({t[0] for t in triples[-window:]})
    assert m.h_s <= math.log2(distinct) + TOL
    o = batch_recompute_oracle(h)
    for f in ("psi", "asymmetry", "memory"):
        assert getattr(m, f) == pytest.approx(getattr(o, f), abs=TOL)


def test_identical_pushes_are_bit_identical(rng):
    data = [rng.integers(0, 9, 1500) for _ in range(3)]
    m1 = compute_metrics(fill(TripleHistogram(9, 9, window=400), *data))
    m2 = compute_metrics(fill(TripleHistogram(9, 9, window=400), *data))
    assert m1 == m2


def test_memory_footprint_counts_occupied_cells():
    h = TripleHistogram(4, 4, window=10, n_min=1)
    h.push(SampleTriple(1, 2, 3))
    assert h.occupied_cells() == 7
    assert h.memory_bytes() == 7 * 12
