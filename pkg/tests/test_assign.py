import numpy as np

from lndet.detmini.assign import Grid, atss_assign
from oracles import ref_atss


def test_gt_covering_one_anchor():
    g = Grid(6, 6, 4)
    # location (2, 3): center (10, 14); anchor_scale 1 -> anchor (8, 12, 12, 16)
    t = atss_assign([(8.0, 12.0, 12.0, 16.0)], g, anchor_scale=1.0, topk=9)
    assert t.positive[2, 3]
    assert t.q[2, 3] == 1.0


def test_empty_gt():
    t = atss_assign([], Grid(5, 4, 4))
    assert t.num_pos == 0
    assert np.all(t.q == 0) and np.all(t.gt_index == -1)


def _compare(gts, grid, scale, topk):
    t = atss_assign(gts, grid, scale, topk)
    ref = ref_atss(gts, grid.gx, grid.gy, grid.stride, scale, topk)
    flat_pos = set(np.flatnonzero(t.positive.ravel()).tolist())
    assert flat_pos == set(ref)
    for k, (g, q, box) in ref.items():
        i, j = divmod(k, grid.gy)
        assert t.gt_index[i, j] == g
        assert abs(t.q[i, j] - q) <= 1e-9
        np.testing.assert_allclose(t.box[i, j], box, rtol=0, atol=1e-9)


def test_matches_bruteforce_24x24(rng):
    grid = Grid(24, 24, 4)
    for _ in range(20):
        gts = []
        for _ in range(2):
            x0, y0 = rng.uniform(0, 80, size=2)
            gts.append((x0, y0, x0 + rng.uniform(4, 16), y0 + rng.uniform(4, 16)))
        _compare(gts, grid, 8.0, 9)


def test_every_gt_gets_a_positive(rng):
    grid = Grid(8, 8, 4)
    for _ in range(20):
        x0, y0 = rng.uniform(0, 28, size=2)
        t = atss_assign([(x0, y0, x0 + 1.5, y0 + 1.5)], grid, 3.0)
        assert t.num_pos >= 1
