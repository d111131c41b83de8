import numpy as np
import pytest

from tasdr._kernels import available_backends, fallback, get_backend

HAVE_COMPILED = "compiled" in available_backends()
BACKENDS = sorted(available_backends())


def ragged(rng, n, lo, hi, d):
    lengths = rng.integers(lo, hi, size=n)
    emb = np.ascontiguousarray(rng.standard_normal((int(lengths.sum()), d)))
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return emb, offsets


@pytest.mark.parametrize("backend_name", BACKENDS)
class TestContracts:
    def test_topk_validates_k(self, backend_name):
        backend = get_backend(backend_name)
        m = np.ascontiguousarray(np.eye(3))
        q = np.zeros(3)
        with pytest.raises(ValueError):
            backend.topk_dot(m, q, 0)
        with pytest.raises(ValueError):
            backend.topk_dot(m, q, 4)

    def test_topk_descending_with_index_ties(self, backend_name):
        backend = get_backend(backend_name)
        rng = np.random.default_rng(0)
        m = np.ascontiguousarray(rng.standard_normal((50, 6)))
        m[7] = m[3]  # force an exact tie
        q = np.ascontiguousarray(rng.standard_normal(6))
        idx, scores = backend.topk_dot(m, q, 50)
        assert sorted(scores, reverse=True) == list(scores)
        pos3 = list(idx).index(3)
        pos7 = list(idx).index(7)
        assert pos3 < pos7  # equal scores: lower row index first

    def test_assign_nearest_tie_lowest_index(self, backend_name):
        backend = get_backend(backend_name)
        points = np.ascontiguousarray([[0.0, 0.0]])
        centroids = np.ascontiguousarray([[1.0, 0.0], [-1.0, 0.0]])
        labels, d2 = backend.assign_nearest(points, centroids)
        assert labels[0] == 0
        assert d2[0] == pytest.approx(1.0)

    def test_late_interaction_single_tokens(self, backend_name):
        backend = get_backend(backend_name)
        q = np.ascontiguousarray([[1.0, 0.0]])
        p = np.ascontiguousarray([[0.6, 0.8], [1.0, 0.0]])
        off_q = np.array([0, 1], dtype=np.int64)
        off_p = np.array([0, 2], dtype=np.int64)
        # max over the two passage tokens: max(0.6, 1.0) = 1.0
        out = backend.late_interaction_scores(q, off_q, p, off_p)
        assert out.shape == (1, 1)
        assert out[0, 0] == pytest.approx(1.0)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled extension unavailable")
class TestBackendAgreement:
    def test_topk_identical_rankings(self):
        compiled = get_backend("compiled")
        rng = np.random.default_rng(1)
        for trial in range(20):
            n = int(rng.integers(5, 400))
            d = int(rng.integers(2, 32))
            k = int(rng.integers(1, n + 1))
            m = np.ascontiguousarray(rng.standard_normal((n, d)))
            q = np.ascontiguousarray(rng.standard_normal(d))
            i_f, s_f = fallback.topk_dot(m, q, k)
            i_c, s_c = compiled.topk_dot(m, q, k)
            np.testing.assert_array_equal(i_f, i_c, err_msg=f"trial {trial}")
            np.testing.assert_allclose(s_f, s_c, rtol=1e-12)

    def test_late_interaction_agreement(self):
        compiled = get_backend("compiled")
        rng = np.random.default_rng(2)
        for _ in range(10):
            q_emb, q_off = ragged(rng, int(rng.integers(1, 8)), 1, 12, 8)
            p_emb, p_off = ragged(rng, int(rng.integers(1, 10)), 1, 30, 8)
            a = fallback.late_interaction_scores(q_emb, q_off, p_emb, p_off)
            b = compiled.late_interaction_scores(q_emb, q_off, p_emb, p_off)
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_assign_agreement(self):
        compiled = get_backend("compiled")
        rng = np.random.default_rng(3)
        for _ in range(20):
            n, k, d = int(rng.integers(2, 200)), int(rng.integers(1, 12)), 5
            points = np.ascontiguousarray(rng.standard_normal((n, d)))
            centroids = np.ascontiguousarray(rng.standard_normal((k, d)))
            l_f, d_f = fallback.assign_nearest(points, centroids)
            l_c, d_c = compiled.assign_nearest(points, centroids)
            np.testing.assert_array_equal(l_f, l_c)
            np.testing.assert_allclose(d_f, d_c, rtol=1e-9, atol=1e-9)


class TestSelection:
    def test_get_backend_names(self):
        assert fallback is get_backend("fallback")
        with pytest.raises(ValueError):
            get_backend("nonsense")

    def test_active_default_selection(self):
        import os

        from tasdr import _kernels

        if os.environ.get("TASDR_FORCE_COMPILED") and HAVE_COMPILED:
            assert _kernels.active.NAME == "compiled"
        elif not HAVE_COMPILED:
            assert _kernels.active.NAME == "fallback"
        else:
            # hybrid default: compiled scan, BLAS-backed dense kernels
            assert _kernels.active.NAME == "hybrid"
            assert _kernels.active.topk_dot is _kernels.compiled.topk_dot
            assert (
                _kernels.active.late_interaction_scores
                is fallback.late_interaction_scores
            )
