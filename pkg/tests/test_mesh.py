import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwropt.errors import DwroptError, SizingError
from dwropt.mesh import (
    CellSet,
    HOLED_RECT,
    UNIT_SQUARE,
    build_initial,
    dorfler_mark,
    dump_mesh,
    load_mesh,
    refine,
    refine_all,
)


def mark(mesh, ids):
    return CellSet(frozenset(ids), mesh.generation)


def adjacency_level_gaps(mesh):
    """Oracle: exhaustive pairwise edge-adjacency scan over active cells."""
    org = mesh.cell_origin()
    h = mesh.cell_h()
    gaps = []
    n = mesh.ncells
    for a in range(n):
        ax0, ay0 = org[a]
        ax1, ay1 = ax0 + h[a], ay0 + h[a]
        for b in range(a + 1, n):
            bx0, by0 = org[b]
            bx1, by1 = bx0 + h[b], by0 + h[b]
            touch_x = abs(ax1 - bx0) < 1e-12 or abs(bx1 - ax0) < 1e-12
            touch_y = abs(ay1 - by0) < 1e-12 or abs(by1 - ay0) < 1e-12
            overlap_y = min(ay1, by1) - max(ay0, by0) > 1e-12
            overlap_x = min(ax1, bx1) - max(ax0, bx0) > 1e-12
            if (touch_x and overlap_y) or (touch_y and overlap_x):
                gaps.append(abs(int(mesh.level[a]) - int(mesh.level[b])))
    return max(gaps) if gaps else 0


class TestBuildInitial:
    def test_unit_square_half(self):
        m = build_initial(UNIT_SQUARE, 0.5)
        assert m.ncells == 4
        assert m.nverts == 9

    def test_holed_domain_count(self):
        # oracle: enumerate the 14x10 grid and drop cells inside the holes
        n = 0
        for i in range(14):
            for j in range(10):
                cx, cy = (i + 0.5) * 0.5, (j + 0.5) * 0.5
                if any(x0 < cx < x1 and y0 < cy < y1 for x0, y0, x1, y1 in HOLED_RECT.holes):
                    continue
                n += 1
        assert n == 116
        m = build_initial(HOLED_RECT, 0.5)
        assert m.ncells == 116

    def test_bad_cell_size(self):
        with pytest.raises(SizingError):
            build_initial(UNIT_SQUARE, 0.3)

    def test_area(self):
        m = build_initial(HOLED_RECT, 0.5)
        assert m.total_area() == pytest.approx(29.0, rel=1e-12)

    def test_boundary_tags_cover_outer_and_holes(self):
        m = build_initial(HOLED_RECT, 0.5)
        # total tagged face length: outer perimeter 24 plus 6 holes x 4
        h = m.cell_h()
        length = sum(
            h[c] for c in range(m.ncells) for f in range(4) if m.btags[c, f] != 0
        )
        assert length == pytest.approx(2 * (7 + 5) + 6 * 4.0, rel=1e-12)


class TestRefine:
    def test_single_mark(self):
        m = build_initial(UNIT_SQUARE, 0.5)
        m2 = refine(m, mark(m, [0]))
        assert m2.ncells == 7

    def test_mark_all(self):
        m = build_initial(UNIT_SQUARE, 0.5)
        m2 = refine_all(m)
        assert m2.ncells == 16

    def test_closure_enforced(self):
        # refine one cell twice, then force a level-2 gap; closure must split
        # the intermediate cell so the exhaustive scan sees gaps <= 1
        m = build_initial(UNIT_SQUARE, 0.5)
        m = refine(m, mark(m, [0]))
        ci = int(np.argmin(m.cell_h()))
        m = refine(m, mark(m, [ci]))
        assert adjacency_level_gaps(m) <= 1
        ci = int(np.argmin([m.cell_h()[c] for c in range(m.ncells)]))
        m = refine(m, mark(m, [ci]))
        assert adjacency_level_gaps(m) <= 1
        assert m.max_level_gap() <= 1

    def test_area_preserved(self):
        m = build_initial(HOLED_RECT, 0.5)
        rng = np.random.default_rng(7)
        for _ in range(3):
            ids = rng.choice(m.ncells, size=max(1, m.ncells // 10), replace=False)
            m = refine(m, mark(m, ids))
            assert m.total_area() == pytest.approx(29.0, rel=1e-12)
            assert m.max_level_gap() <= 1

    def test_generation_mismatch(self):
        m = build_initial(UNIT_SQUARE, 0.5)
        m2 = refine(m, mark(m, [0]))
        with pytest.raises(DwroptError):
            refine(m2, mark(m, [0]))

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=1000), min_size=1, max_size=4))
    def test_closure_random_marks(self, seq):
        m = build_initial(UNIT_SQUARE, 1.0)
        for pick in seq:
            m = refine(m, mark(m, [pick % m.ncells]))
        assert m.max_level_gap() <= 1
        assert adjacency_level_gaps(m) <= 1
        assert m.total_area() == pytest.approx(1.0, rel=1e-12)


class TestDorfler:
    def test_forced_prefix(self):
        got = dorfler_mark([4, 2, 1, 1], 0.5)
        assert set(got.ids) == {0}

    def test_tie_break(self):
        got = dorfler_mark([1, 1, 1, 1], 0.5)
        assert set(got.ids) == {0, 1}

    def test_theta_one(self):
        got = dorfler_mark([3, 3, 2], 1.0)
        assert set(got.ids) == {0, 1, 2}

    def test_all_zero(self):
        assert len(dorfler_mark([0.0, 0.0], 0.5)) == 0

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(min_value=0, max_value=1e6, allow_nan=False), min_size=1, max_size=40),
        st.floats(min_value=1e-3, max_value=1.0),
    )
    def test_threshold_and_minimality(self, eta, theta):
        got = dorfler_mark(eta, theta)
        eta = np.asarray(eta)
        total = eta.sum()
        if total == 0:
            assert len(got) == 0
            return
        picked = sorted(got.ids)
        ssum = eta[picked].sum()
        assert ssum >= theta * total - 1e-9 * total
        # minimality: dropping the smallest marked indicator breaks the bound
        if len(picked) > 1:
            smallest = min(picked, key=lambda i: (eta[i], -i))
            assert ssum - eta[smallest] < theta * total + 1e-9 * total


class TestDump:
    def test_round_trip_bit_exact(self):
        m = build_initial(HOLED_RECT, 0.5)
        m = refine(m, mark(m, [0, 5, 17]))
        text = dump_mesh(m)
        m2 = load_mesh(text)
        assert dump_mesh(m2) == text

    def test_round_trip_preserves_geometry(self):
        m = build_initial(UNIT_SQUARE, 0.25)
        m = refine(m, mark(m, [3]))
        m2 = load_mesh(dump_mesh(m))
        assert m2.ncells == m.ncells
        assert m2.total_area() == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_array_equal(m2.level, m.level)
        np.testing.assert_array_equal(m2.btags, m.btags)
