import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from delt.core import ConfigError, RecoveryConfig
from delt.schedule import (active_subbatches, make_schedule, savings_ratio, schedule_for, subbatch_sizes,
                           total_image_iterations)


def brute_force_total(ipc, m, mi, ri):
    sizes = [0] * m
    for i in range(ipc):
        # same split rule, recomputed by dealing images out one at a time
        sizes[sorted(range(m), key=lambda b: (sizes[b], b))[0]] += 1
    total = 0
    for b in range(m):
        for _ in range(sizes[b]):
            for t in range(b * ri, mi):
                total += 1
    return total


@st.composite
def valid_params(draw):
    m = draw(st.integers(1, 10))
    ipc = draw(st.integers(m, 60))
    ri = draw(st.integers(0, 300))
    mi = draw(st.integers((m - 1) * ri + 1, (m - 1) * ri + 400))
    return ipc, m, mi, ri


def test_published_schedule():
    s = make_schedule(8, 8, 4000, 500)
    assert [e.start for e in s.entries] == [0, 500, 1000, 1500, 2000, 2500, 3000, 3500]
    assert [e.length for e in s.entries] == [4000, 3500, 3000, 2500, 2000, 1500, 1000, 500]
    assert s.entries[-1].length == 500
    assert all(e.end == 4000 for e in s.entries)


def test_single_subbatch():
    s = make_schedule(10, 1, 4000, 123)
    assert [(e.start, e.length) for e in s.entries] == [(0, 4000)]
    assert total_image_iterations(s) == 40000
    assert savings_ratio(s) == 0


def test_last_subbatch_without_iterations():
    with pytest.raises(ConfigError, match="last sub-batch has no iterations"):
        make_schedule(8, 8, 3000, 500)


@pytest.mark.parametrize(
    "args, total, ratio",
    [((4, 4, 4000, 1000), 10000, 0.375), ((8, 8, 4000, 500), 18000, 0.4375)],
)
def test_totals(args, total, ratio):
    s = make_schedule(*args)
    assert total_image_iterations(s) == total == brute_force_total(*args)
    assert savings_ratio(s) == pytest.approx(ratio, abs=1e-15)


def test_even_split_formula():
    # ipc*MI - k*RI*M(M-1)/2 with k = 5
    s = make_schedule(20, 4, 3000, 400)
    assert total_image_iterations(s) == 20 * 3000 - 5 * 400 * 4 * 3 // 2


def test_uneven_split():
    assert subbatch_sizes(10, 8) == [2, 2, 1, 1, 1, 1, 1, 1]
    s = make_schedule(10, 8, 4000, 500)
    assert [e.first_slot for e in s.entries] == [0, 2, 4, 5, 6, 7, 8, 9]
    assert s.iterations_for(1) == 4000 and s.iterations_for(2) == 3500 and s.iterations_for(9) == 500
    assert total_image_iterations(s) == brute_force_total(10, 8, 4000, 500) == 25500


def test_active_boundaries():
    s = make_schedule(8, 8, 4000, 500)
    assert active_subbatches(s, 0) == {0}
    assert active_subbatches(s, 499) == {0}
    assert active_subbatches(s, 500) == {0, 1}
    assert active_subbatches(s, 3999) == set(range(8))
    for t in (-1, 4000):
        with pytest.raises(ConfigError):
            active_subbatches(s, t)


def test_schedule_for_config():
    s = schedule_for(RecoveryConfig(ipc=10, num_subbatches=5, max_iterations=1000, round_iterations=100))
    assert s.subbatch_size == 2 and len(s.entries) == 5


@given(valid_params())
def test_closed_form_matches_brute_force(p):
    assert total_image_iterations(make_schedule(*p)) == brute_force_total(*p)


@given(valid_params(), st.data())
def test_active_cardinality(p, data):
    ipc, m, mi, ri = p
    s = make_schedule(*p)
    t = data.draw(st.integers(0, mi - 1))
    expected = m if ri == 0 else min(m, t // ri + 1)
    assert len(active_subbatches(s, t)) == expected
    if t + 1 < mi:
        assert active_subbatches(s, t) <= active_subbatches(s, t + 1)


@given(valid_params())
def test_entries_invariants(p):
    ipc, m, mi, ri = p
    s = make_schedule(*p)
    assert s.entries[0].start == 0 and s.entries[0].length == mi
    assert all(b.start - a.start == ri for a, b in zip(s.entries, s.entries[1:]))
    assert all(e.end == mi for e in s.entries)
    assert sum(e.size for e in s.entries) == ipc
    assert 0 <= savings_ratio(s) < 1


@given(st.integers(2, 8), st.integers(1, 200), st.integers(0, 2000))
def test_savings_increase_with_m(m, ri, extra):
    ipc = 8
    mi = m * ri + 1 + extra
    assume(m < ipc)
    a = savings_ratio(make_schedule(ipc, m, mi, ri))
    b = savings_ratio(make_schedule(ipc, m + 1, mi, ri))
    assert b > a
