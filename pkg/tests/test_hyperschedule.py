import numpy as np
import pytest
from fractions import Fraction

from tokendiff.hyperschedule import (build, window_width, generation_rate,
                                     partition_at, tau_to_csv, tau_to_pgm)


def brute_window_width(hs):
    levels = hs.levels
    best = 0
    for t in range(hs.T):
        count = 0
        for i in range(hs.d):
            pair = (hs.tau[t, i], hs.tau[t + 1, i])
            if pair != (0, 0) and pair != (levels, levels):
                count += 1
        best = max(best, count)
    return best


def test_quench_matrix():
    hs = build("quench", 4, 1)
    expect = np.array([[1, 1, 1, 1],
                       [0, 1, 1, 1],
                       [0, 0, 1, 1],
                       [0, 0, 0, 1],
                       [0, 0, 0, 0]])
    assert np.array_equal(hs.tau, expect)
    assert hs.T == 4
    assert window_width(hs) == 1


def test_flat_rows_constant():
    hs = build("flat", 4, 4)
    for t in range(5):
        assert np.all(hs.tau[t] == 4 - t)
    assert window_width(hs) == 4
    assert generation_rate(hs) == 1


def test_flat_window_covers_sequence():
    hs = build("flat", 1024, 16)
    assert window_width(hs) == 1024


def test_block_construction():
    hs = build("block", 9, 3, omega=3, rho=1)
    assert hs.T == 9
    # block b descends levels 3 -> 2 -> 1 -> 0 across rows 3b .. 3b+3
    for b in range(3):
        cols = slice(3 * b, 3 * b + 3)
        assert np.all(hs.tau[3 * b, cols] == 3)
        assert np.all(hs.tau[3 * b + 1, cols] == 2)
        assert np.all(hs.tau[3 * b + 2, cols] == 1)
        assert np.all(hs.tau[3 * b + 3, cols] == 0)
    hs.validate()


def test_block_rho_two():
    hs = build("block", 8, 4, omega=4, rho=2)
    assert hs.T == 4
    assert generation_rate(hs) == 2


def test_slide_step_count_and_rate():
    hs = build("slide", 12, 3, omega=3, rho=1)
    assert hs.T == 12 + 3 - 1
    assert generation_rate(hs) == Fraction(12, 14)


def test_build_rejects_bad_args():
    with pytest.raises(ValueError):
        build("block", 4, 3, omega=5)
    with pytest.raises(ValueError):
        build("flat", 4, 0)
    with pytest.raises(ValueError):
        build("slide", 4, 2, omega=2, rho=0)
    with pytest.raises(ValueError):
        build("spiral", 4, 2)


def test_partition_block_example():
    hs = build("block", 9, 3, omega=3, rho=1)
    p = partition_at(hs, 4)
    assert (p.settled_end, p.active_end) == (3, 6)
    assert list(p.settled) == [0, 1, 2]
    assert list(p.active) == [3, 4, 5]
    assert list(p.worthless) == [6, 7, 8]


def test_partition_final_step_has_no_worthless():
    for kind, kwargs in (("quench", {}), ("block", {"omega": 2}), ("slide", {"omega": 2})):
        hs = build(kind, 8, 1 if kind == "quench" else 4, **kwargs)
        p = partition_at(hs, hs.T - 1)
        assert p.active_end == hs.d


def test_partition_flat_all_active():
    hs = build("flat", 6, 5)
    for t in range(hs.T):
        p = partition_at(hs, t)
        assert (p.settled_end, p.active_end) == (0, 6)


def test_partition_bounds():
    hs = build("flat", 6, 5)
    with pytest.raises(ValueError):
        partition_at(hs, hs.T)
    with pytest.raises(ValueError):
        partition_at(hs, -1)


def test_quench_equals_slide_width_one():
    for d in (1, 5, 12):
        q = build("quench", d, 1)
        s = build("slide", d, 1, omega=1)
        assert np.array_equal(q.tau, s.tau)


@pytest.mark.parametrize("kind", ["block", "slide"])
@pytest.mark.parametrize("d,omega", [(8, 1), (8, 3), (12, 4), (13, 5), (20, 7)])
def test_window_width_matches_parameter(kind, d, omega):
    hs = build(kind, d, omega, omega=omega, rho=1)
    assert window_width(hs) == omega
    assert window_width(hs) == brute_window_width(hs)


@pytest.mark.parametrize("kind", ["quench", "flat", "block", "slide"])
def test_invariants_and_partitions(kind):
    for d in (1, 2, 7, 16):
        omegas = [None] if kind in ("quench", "flat") else [w for w in (1, 2, 5) if w <= d]
        for omega in omegas:
            levels = 1 if kind == "quench" else (omega or 4)
            hs = build(kind, d, levels, omega=omega)
            hs.validate()
            for t in range(hs.T):
                p = partition_at(hs, t)
                assert 0 <= p.settled_end <= p.active_end <= d
                # partitions tile [0, d)
                assert len(p.settled) + len(p.active) + len(p.worthless) == d


def test_exports_shape():
    hs = build("quench", 4, 1)
    csv = tau_to_csv(hs)
    assert len(csv.strip().splitlines()) == hs.T + 1
    pgm = tau_to_pgm(hs)
    assert pgm.startswith("P2\n4 5\n1\n")
