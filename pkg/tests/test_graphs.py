"""Graph builder tests against exhaustive brute-force neighbor selection."""

import numpy as np
import pytest

from gcdn.graphs import (
    build_graph_infer,
    build_graph_train,
    edge_labels,
    merge_graphs,
)


def brute_force_neighbors(features, k, window=None):
    """Per-pixel selection by sorting (distance, flat index) over candidates."""
    h, w, f = features.shape
    feats = features.reshape(-1, f).astype(np.float64)
    n = h * w
    out = []
    r = None if window is None else (window - 1) // 2
    for i in range(n):
        yi, xi = divmod(i, w)
        cand = []
        for j in range(n):
            if j == i:
                continue
            yj, xj = divmod(j, w)
            if max(abs(yj - yi), abs(xj - xi)) <= 1:
                continue
            if r is not None and max(abs(yj - yi), abs(xj - xi)) > r:
                continue
            d = float(((feats[j] - feats[i]) ** 2).sum())
            cand.append((d, j))
        cand.sort()
        out.append(sorted(j for _, j in cand[:k]))
    return out


def graph_neighbor_sets(g):
    return [sorted(lst.tolist()) for lst in g.neighbor_lists()]


class TestTrainBuilder:
    def test_constant_features_tie_break(self):
        # all distances zero: the two lowest-index non-excluded pixels win
        feats = np.ones((5, 5, 3), dtype=np.float32)
        g = build_graph_train(feats, k=2)
        expected = brute_force_neighbors(feats, 2)
        assert graph_neighbor_sets(g) == expected
        # pixel 0 excludes {0,1,5,6}; lowest-index candidates are 2 and 3
        assert graph_neighbor_sets(g)[0] == [2, 3]

    def test_3x3_patch_literal_exclusion(self):
        # the center pixel has no candidates; corners still see far pixels
        rng = np.random.default_rng(0)
        feats = rng.standard_normal((3, 3, 2)).astype(np.float32)
        g = build_graph_train(feats, k=1)
        sets = graph_neighbor_sets(g)
        assert sets == brute_force_neighbors(feats, 1)
        assert sets[4] == []  # center: all 8 others excluded

    @pytest.mark.parametrize("seed", range(5))
    def test_random_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((6, 6, 4)).astype(np.float32)
        g = build_graph_train(feats, k=3)
        assert graph_neighbor_sets(g) == brute_force_neighbors(feats, 3)

    def test_k_exceeds_candidates(self):
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((4, 4, 2)).astype(np.float32)
        g = build_graph_train(feats, k=100)
        assert graph_neighbor_sets(g) == brute_force_neighbors(feats, 100)

    def test_k_zero_empty(self):
        feats = np.zeros((5, 5, 2), dtype=np.float32)
        g = build_graph_train(feats, k=0)
        assert g.n_edges == 0
        assert g.counts.sum() == 0

    def test_determinism(self):
        rng = np.random.default_rng(2)
        feats = rng.standard_normal((8, 8, 4)).astype(np.float32)
        g1 = build_graph_train(feats, k=4)
        g2 = build_graph_train(feats.copy(), k=4)
        np.testing.assert_array_equal(g1.src, g2.src)
        np.testing.assert_array_equal(g1.dst, g2.dst)


class TestInferBuilder:
    def test_covering_window_equals_train(self):
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((7, 5, 3)).astype(np.float32)
        gt = build_graph_train(feats, k=3)
        gi = build_graph_infer(feats, k=3, window=2 * 7 + 1)
        np.testing.assert_array_equal(gt.src, gi.src)
        np.testing.assert_array_equal(gt.dst, gi.dst)
        np.testing.assert_array_equal(gt.labels, gi.labels)

    @pytest.mark.parametrize("seed", range(4))
    def test_windowed_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        feats = rng.standard_normal((16, 16, 4)).astype(np.float32)
        g = build_graph_infer(feats, k=4, window=9)
        assert graph_neighbor_sets(g) == brute_force_neighbors(feats, 4, window=9)

    def test_border_clamping(self):
        rng = np.random.default_rng(4)
        feats = rng.standard_normal((50, 50, 2)).astype(np.float32)
        g = build_graph_infer(feats, k=8, window=43)
        lists = g.neighbor_lists()
        # corner pixel candidates all come from the in-bounds window part
        for j in lists[0]:
            yj, xj = divmod(int(j), 50)
            assert yj <= 21 and xj <= 21

    def test_even_window_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            build_graph_infer(np.zeros((8, 8, 1), np.float32), 2, window=10)


class TestInvariantsRandomized:
    @pytest.mark.parametrize("seed", range(25))
    def test_graph_invariants(self, seed):
        rng = np.random.default_rng(100 + seed)
        h, w = rng.integers(4, 13, size=2)
        f = int(rng.integers(1, 6))
        k = int(rng.integers(0, 6))
        feats = rng.standard_normal((h, w, f)).astype(np.float32)
        if rng.random() < 0.5:
            window = int(2 * rng.integers(1, 6) + 1)
            g = build_graph_infer(feats, k, window)
        else:
            window = None
            g = build_graph_train(feats, k)
        lists = g.neighbor_lists()
        feats_flat = feats.reshape(-1, f)
        for i, nb in enumerate(lists):
            assert len(nb) <= k
            yi, xi = divmod(i, int(w))
            for j in nb:
                assert j != i
                yj, xj = divmod(int(j), int(w))
                cheb = max(abs(yj - yi), abs(xj - xi))
                assert cheb > 1  # 8-neighborhood exclusion
                if window is not None:
                    assert cheb <= (window - 1) // 2

    @pytest.mark.parametrize("seed", range(8))
    def test_neighbor_set_optimality(self, seed):
        # max distance among chosen <= min distance among rejected candidates
        rng = np.random.default_rng(200 + seed)
        feats = rng.standard_normal((9, 9, 3)).astype(np.float32)
        k = 3
        g = build_graph_train(feats, k)
        feats64 = feats.reshape(-1, 3).astype(np.float64)
        lists = g.neighbor_lists()
        for i, nb in enumerate(lists):
            if len(nb) < k:
                continue
            yi, xi = divmod(i, 9)
            chosen = set(nb.tolist())
            dches = [((feats64[j] - feats64[i]) ** 2).sum() for j in nb]
            rejected = []
            for j in range(81):
                yj, xj = divmod(j, 9)
                if j == i or max(abs(yj - yi), abs(xj - xi)) <= 1 or j in chosen:
                    continue
                rejected.append(((feats64[j] - feats64[i]) ** 2).sum())
            if rejected:
                assert max(dches) <= min(rejected) + 1e-6


class TestEdgeLabels:
    def test_definition(self):
        feats = np.zeros((1, 4, 2), dtype=np.float32)
        feats[0, 0] = [1, 2]
        feats[0, 2] = [40, 40]  # push the other candidate far away
        feats[0, 3] = [3, 5]
        g = build_graph_train(feats, k=1)
        g = edge_labels(feats, g)
        e = np.flatnonzero((g.dst == 0) & (g.src == 3))
        assert len(e) == 1
        np.testing.assert_allclose(g.labels[e[0]], [2, 3], atol=0)

    def test_no_self_loops_present(self):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((6, 6, 3)).astype(np.float32)
        g = build_graph_train(feats, k=4)
        assert not np.any(g.src == g.dst)

    def test_relabel_after_feature_change(self):
        rng = np.random.default_rng(6)
        feats = rng.standard_normal((5, 5, 3)).astype(np.float32)
        g = build_graph_train(feats, k=2)
        new_feats = rng.standard_normal((5, 5, 3)).astype(np.float32)
        g2 = edge_labels(new_feats, g)
        flat = new_feats.reshape(-1, 3)
        np.testing.assert_array_equal(g2.labels, flat[g2.src] - flat[g2.dst])
        # topology untouched
        np.testing.assert_array_equal(g2.src, g.src)

    def test_label_antisymmetry(self):
        rng = np.random.default_rng(7)
        feats = rng.standard_normal((5, 5, 3)).astype(np.float32)
        g = build_graph_train(feats, k=3)
        flat = feats.reshape(-1, 3)
        for e in range(0, g.n_edges, 7):
            i, j = g.dst[e], g.src[e]
            d_ij = flat[j] - flat[i]
            d_ji = flat[i] - flat[j]
            np.testing.assert_allclose(d_ij, -d_ji, atol=0)

    def test_shape_mismatch_raises(self):
        feats = np.zeros((5, 5, 2), np.float32)
        g = build_graph_train(feats, k=1)
        with pytest.raises(ValueError):
            edge_labels(np.zeros((6, 5, 2), np.float32), g)


class TestMerge:
    def test_offsets_and_counts(self):
        rng = np.random.default_rng(8)
        g1 = build_graph_train(rng.standard_normal((5, 5, 2)).astype(np.float32), 2)
        g2 = build_graph_train(rng.standard_normal((5, 5, 2)).astype(np.float32), 2)
        m = merge_graphs([g1, g2])
        assert m.n_pixels == 50
        assert m.n_edges == g1.n_edges + g2.n_edges
        np.testing.assert_array_equal(m.src[: g1.n_edges], g1.src)
        np.testing.assert_array_equal(m.src[g1.n_edges :], g2.src + 25)
        assert np.all(np.diff(m.dst) >= 0)
