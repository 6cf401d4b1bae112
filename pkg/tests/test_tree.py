import numpy as np
import pytest

from treeattn import tree as tr
from treeattn.tensor import NumericError, ShapeError, Tensor


def oracle_route(tree, q):
    """Independent per-node sign/argmax walk, scalar arithmetic only."""
    nodes = [0]
    j = 0
    for l in range(tree.height):
        s = tree.scores_per_node(l)
        scores = []
        for t in range(s):
            w = tree.levels[l].w.data[j * s + t]
            b = tree.levels[l].b.data[j * s + t]
            scores.append(float(np.dot(w, q) + b))
        if s == 1:
            c = 1 if scores[0] >= 0 else 0
        else:
            best = max(scores)
            c = max(i for i, v in enumerate(scores) if v == best)
        j = j * tree.branching[l] + c
        nodes.append(j)
    return nodes


class TestDecide:
    def test_rightmost_for_positive_bias(self):
        t = tr.lemma1_tree(3, 4, 0.01)
        rng = np.random.default_rng(0)
        for _ in range(10):
            q = rng.normal(size=4)
            assert tr.decide(t, 0, 0, q) == 1
            assert tr.decide(t, 2, 3, q) == 1

    def test_hand_arithmetic(self):
        t = tr.TreeParams(1, [2], 2, [tr.TreeLevel(np.array([[1.0, 0.0]]), np.array([-0.5]))])
        assert tr.decide(t, 0, 0, np.array([1.0, 1.0])) == 1   # f = 0.5
        assert tr.decide(t, 0, 0, np.array([0.2, 9.0])) == 0   # f = -0.3

    def test_tie_routes_right(self):
        t = tr.TreeParams(1, [2], 2, [tr.TreeLevel(np.array([[1.0, 0.0]]), np.array([0.0]))])
        assert tr.decide(t, 0, 0, np.array([0.0, 5.0])) == 1   # f = 0 exactly

    def test_kary_argmax(self):
        lev = tr.TreeLevel(np.zeros((3, 2)), np.array([0.1, 0.9, 0.3]))
        t = tr.TreeParams(1, [3], 2, [lev])
        assert tr.decide(t, 0, 0, np.zeros(2)) == 1

    def test_kary_tie_highest_index(self):
        lev = tr.TreeLevel(np.zeros((4, 2)), np.array([0.5, 0.9, 0.9, 0.1]))
        t = tr.TreeParams(1, [4], 2, [lev])
        assert tr.decide(t, 0, 0, np.zeros(2)) == 2

    def test_dim_mismatch_rejected(self):
        t = tr.lemma1_tree(1, 4, 0.1)
        with pytest.raises(ShapeError):
            tr.decide(t, 0, 0, np.zeros(3))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        t = tr.random_tree(3, 5, rng)
        qs = rng.normal(size=(20, 5))
        before = tr.route_matrix(t, qs).copy()
        for lev in t.levels:
            lev.w.data *= 7.5
            lev.b.data *= 7.5
        after = tr.route_matrix(t, qs)
        np.testing.assert_array_equal(before, after)


class TestRoute:
    def test_rightmost_path(self):
        t = tr.lemma1_tree(3, 8, 1e-3)
        rng = np.random.default_rng(2)
        want = [0, 1, 3, 7]
        for _ in range(5):
            assert tr.route(t, rng.normal(size=8)).nodes == want

    def test_height_zero(self):
        t = tr.TreeParams(0, [], 4, [])
        assert tr.route(t, np.zeros(4)).nodes == [0]

    def test_oracle_agreement(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            h = int(rng.integers(1, 5))
            d = int(rng.integers(2, 7))
            kary = rng.random() < 0.4
            branching = list(rng.integers(2, 5, size=h)) if kary else None
            t = tr.random_tree(h, d, rng, branching)
            q = rng.normal(size=d)
            assert tr.route(t, q).nodes == oracle_route(t, q)

    def test_route_matrix_matches_route(self):
        rng = np.random.default_rng(4)
        t = tr.random_tree(4, 6, rng)
        x = rng.normal(size=(32, 6))
        paths = tr.route_matrix(t, x)
        for i in range(32):
            assert list(paths[i]) == tr.route(t, x[i]).nodes


class TestBucketize:
    def test_lemma1_single_leaf(self):
        t = tr.lemma1_tree(3, 4, 0.5)
        rng = np.random.default_rng(5)
        bk = tr.bucketize(t, rng.normal(size=(20, 4)))
        counts = bk.leaf_counts()
        assert counts[-1] == 20 and counts[:-1].sum() == 0

    def test_coordinate_split(self):
        t = tr.TreeParams(1, [2], 3, [tr.TreeLevel(np.array([[1.0, 0, 0]]), np.zeros(1))])
        k = np.array([[1.0, 0, 0], [-1.0, 0, 0], [2.0, 0, 0], [-3.0, 0, 0]])
        bk = tr.bucketize(t, k)
        np.testing.assert_array_equal(bk.bucket(1, 1), [0, 2])
        np.testing.assert_array_equal(bk.bucket(1, 0), [1, 3])

    def test_partition_and_parent_union(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            h = int(rng.integers(1, 5))
            t = tr.random_tree(h, 5, rng)
            k = rng.normal(size=(int(rng.integers(1, 40)), 5))
            bk = tr.bucketize(t, k)
            n = k.shape[0]
            for l in range(h + 1):
                allidx = np.concatenate(
                    [bk.bucket(l, j) for j in range(t.nodes_at(l))]
                )
                np.testing.assert_array_equal(np.sort(allidx), np.arange(n))
            for l in range(h):
                b = t.branching[l]
                for j in range(t.nodes_at(l)):
                    kids = np.concatenate(
                        [bk.bucket(l + 1, j * b + c) for c in range(b)]
                    )
                    np.testing.assert_array_equal(np.sort(kids), bk.bucket(l, j))


class TestSoftPath:
    def test_symmetric_at_zero_score(self):
        t = tr.TreeParams(1, [2], 2, [tr.TreeLevel(np.zeros((1, 2)), np.zeros(1))])
        sp = tr.soft_path(t, np.array([3.0, -1.0]), tau=1.0)
        np.testing.assert_allclose(sp.levels[1], [0.5, 0.5], atol=1e-15)

    def test_saturation_on_rightmost_tree(self):
        eps = 0.05
        t = tr.lemma1_tree(3, 4, eps)
        sp = tr.soft_path(t, np.zeros(4), tau=eps / 10)
        assert sp.levels[3][-1] > 0.99

    def test_levels_sum_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h = int(rng.integers(1, 5))
            kary = rng.random() < 0.5
            branching = list(rng.integers(2, 5, size=h)) if kary else None
            t = tr.random_tree(h, 4, rng, branching)
            sp = tr.soft_path(t, rng.normal(size=4), tau=0.9)
            for lev in sp.levels:
                assert abs(lev.sum() - 1.0) < 1e-9
                assert (lev >= 0).all()

    def test_bad_tau_rejected(self):
        t = tr.lemma1_tree(1, 2, 0.1)
        with pytest.raises(NumericError):
            tr.soft_path(t, np.zeros(2), tau=0.0)

    def test_argmax_matches_hard_route_when_saturated(self):
        # guard: skip nodes where any |f| < 10*tau could flip the argmax
        rng = np.random.default_rng(8)
        tau = 1e-3
        checked = 0
        for _ in range(50):
            h = int(rng.integers(1, 5))
            t = tr.random_tree(h, 4, rng)
            q = rng.normal(size=4)
            fs = []
            j = 0
            for l in range(h):
                f = float(t.levels[l].w.data[j] @ q + t.levels[l].b.data[j])
                fs.append(abs(f))
                j = j * 2 + (1 if f >= 0 else 0)
            if min(fs) < 10 * tau:
                continue
            sp = tr.soft_path(t, q, tau)
            hard = tr.route(t, q).nodes
            for l in range(h + 1):
                assert int(np.argmax(sp.levels[l])) == hard[l]
            checked += 1
        assert checked > 25


class TestConstructors:
    def test_lemma1_rejects_bad_eps(self):
        with pytest.raises(NumericError):
            tr.lemma1_tree(2, 4, 0.0)

    def test_lemma1_height_zero(self):
        t = tr.lemma1_tree(0, 4, 0.1)
        assert t.leaf_count == 1
        assert tr.route(t, np.ones(4)).nodes == [0]

    def test_grow_preserves_prefix_bitwise(self):
        rng = np.random.default_rng(9)
        t = tr.random_tree(2, 5, rng)
        g = tr.grow(t, 3, rng_seed=123)
        for l in range(2):
            assert g.levels[l].w.data.tobytes() == t.levels[l].w.data.tobytes()
            assert g.levels[l].b.data.tobytes() == t.levels[l].b.data.tobytes()
        assert g.height == 3

    def test_grow_deterministic(self):
        rng = np.random.default_rng(10)
        t = tr.random_tree(1, 4, rng)
        a = tr.grow(t, 4, rng_seed=7)
        b = tr.grow(t, 4, rng_seed=7)
        for la, lb in zip(a.levels, b.levels):
            assert la.w.data.tobytes() == lb.w.data.tobytes()

    def test_grow_preserves_routing_prefix(self):
        rng = np.random.default_rng(11)
        t = tr.random_tree(2, 6, rng)
        g = tr.grow(t, 4, rng_seed=5)
        x = rng.normal(size=(30, 6))
        p_old = tr.route_matrix(t, x)
        p_new = tr.route_matrix(g, x)
        np.testing.assert_array_equal(p_new[:, :3], p_old)

    def test_grow_rejects_shrink(self):
        t = tr.lemma1_tree(3, 4, 0.1)
        with pytest.raises(ShapeError):
            tr.grow(t, 3, rng_seed=0)

    def test_balanced_tree_even_leaves(self):
        rng = np.random.default_rng(12)
        k = rng.normal(size=(64, 8))
        t = tr.balanced_tree(k, 3, rng)
        counts = tr.bucketize(t, k).leaf_counts()
        np.testing.assert_array_equal(counts, np.full(8, 8))

    def test_balanced_tree_odd_sizes(self):
        rng = np.random.default_rng(13)
        k = rng.normal(size=(45, 4))
        t = tr.balanced_tree(k, 2, rng)
        counts = tr.bucketize(t, k).leaf_counts()
        assert counts.sum() == 45
        assert counts.max() - counts.min() <= 1


class TestSerialization:
    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(14)
        for branching in (None, [4, 3]):
            h = 2
            t = tr.random_tree(h, 5, rng, branching)
            rec = tr.to_record(t)
            back = tr.from_record(rec)
            assert back.height == t.height
            assert back.branching == t.branching
            for la, lb in zip(t.levels, back.levels):
                assert la.w.data.tobytes() == lb.w.data.tobytes()
                assert la.b.data.tobytes() == lb.b.data.tobytes()

    def test_json_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        t = tr.random_tree(3, 4, rng)
        p = tmp_path / "tree.json"
        tr.save_tree(t, p)
        back = tr.load_tree(p)
        for la, lb in zip(t.levels, back.levels):
            assert la.w.data.tobytes() == lb.w.data.tobytes()

    def test_corrupted_payload_rejected(self):
        rng = np.random.default_rng(16)
        t = tr.random_tree(2, 4, rng)
        rec = tr.to_record(t)
        rec["levels"][0]["w"] = rec["levels"][0]["w"][:-8]
        with pytest.raises(tr.TreeFormatError):
            tr.from_record(rec)

    def test_nonfinite_rejected(self):
        rng = np.random.default_rng(17)
        t = tr.random_tree(1, 3, rng)
        t.levels[0].w.data[0, 0] = np.nan
        rec_ok = tr.to_record(tr.random_tree(1, 3, rng))
        # smuggle the nan through the payload
        import base64

        bad = t.levels[0].w.data
        rec_ok["levels"][0]["w"] = base64.b64encode(bad.tobytes()).decode()
        with pytest.raises(tr.TreeFormatError):
            tr.from_record(rec_ok)

    def test_wrong_format_rejected(self):
        with pytest.raises(tr.TreeFormatError):
            tr.from_record({"format": "something-else", "version": 1})
