import numpy as np
import pytest

from oracles import spd
from omdl.baselines import TModLearner, tmod_update
from omdl.coding import SparseCore
from omdl.bench import GenConfig, generate_instance
from omdl.learner import (LearnerConfig, direction_qn, dual_posterior_update,
                          exact_line_search, random_dictionaries)
from omdl.tensor import tucker_reconstruct


class TestUpdate:
    def test_identity(self, rng):
        P = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(tmod_update(np.eye(4), P), P)

    def test_diagonal(self):
        out = tmod_update(np.diag([2.0, 4.0]), np.array([[2.0, 4.0]]))
        np.testing.assert_allclose(out, [[1.0, 1.0]])

    def test_residual(self, rng):
        R, P = spd(rng, 6, cond=50.0), rng.standard_normal((4, 6))
        Psi = tmod_update(R, P)
        assert np.linalg.norm(Psi @ R - P) <= 1e-9 * np.linalg.norm(P)

    @pytest.mark.parametrize("ridge", [1e-6, 1e-2, 1.0])
    def test_ridge_invariant(self, rng, ridge):
        R = rng.standard_normal((5, 2))
        R = R @ R.T
        P = rng.standard_normal((3, 5))
        Psi = tmod_update(R, P, ridge)
        assert np.all(np.isfinite(Psi))
        assert np.linalg.norm(Psi @ (R + ridge * np.eye(5)) - P) <= 1e-8 * (np.linalg.norm(P) + 1)

    def test_singular_gives_nan(self):
        assert np.all(np.isnan(tmod_update(np.zeros((3, 3)), np.ones((2, 3)))))

    def test_negative_ridge(self):
        with pytest.raises(ValueError):
            tmod_update(np.eye(2), np.ones((1, 2)), -1.0)

    def test_equals_newton_step(self, rng):
        R, P = spd(rng, 5), rng.standard_normal((3, 5))
        Psi = np.zeros((3, 5))
        G = Psi @ R - P
        D, _ = direction_qn(G, np.linalg.inv(R))
        alpha, H, _ = exact_line_search(D, G, R)
        assert alpha == pytest.approx(1.0, rel=1e-10)
        np.testing.assert_allclose(Psi + alpha * D, tmod_update(R, P), rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(dual_posterior_update(G, alpha, H), 0.0, atol=1e-9)


def small_config(**kw):
    base = dict(rows=(3, 3, 3), atoms=(4, 4, 4), sparsity=2, seed=3)
    base.update(kw)
    return LearnerConfig(**base)


class TestLearner:
    def test_fixed_point(self, rng):
        cfg = small_config()
        truth = random_dictionaries(cfg.rows, cfg.atoms, rng)
        lrn = TModLearner(cfg, [D.copy() for D in truth], ridge=0.0)
        # full-rank statistics from dense cores generated by the truth
        for _ in range(30):
            S = rng.standard_normal(cfg.atoms)
            lrn.step(tucker_reconstruct(S, truth), SparseCore.from_dense(S))
        for D, T in zip(lrn.dicts, truth):
            np.testing.assert_allclose(D, T, rtol=1e-6, atol=1e-8)

    def test_unregularized_diverges_on_sparse_cores(self):
        gen = GenConfig(rows=10, atoms=20, sparsity=10, trials=1, steps=5)
        rng = np.random.default_rng(0)
        _, stream = generate_instance(gen, rng)
        lrn = TModLearner(gen.learner_config(), ridge=0.0)
        X, _ = next(stream)
        rep = lrn.step(X)
        assert lrn.diverged or any("non_finite" in f for f in rep.flags)

    @pytest.mark.slow
    def test_regularized_stays_finite(self):
        gen = GenConfig(rows=10, atoms=20, sparsity=10, trials=1, steps=500)
        rng = np.random.default_rng(1)
        _, stream = generate_instance(gen, rng)
        lrn = TModLearner(gen.learner_config(), ridge=1e-6)
        for _ in range(500):
            X, _ = next(stream)
            lrn.step(X)
            assert not lrn.diverged
        assert all(np.all(np.isfinite(D)) for D in lrn.dicts)

    def test_snapshot_keeps_ridge(self, tmp_path):
        lrn = TModLearner(small_config(), ridge=0.25)
        lrn.save(tmp_path / "t.npz")
        back = TModLearner.load(tmp_path / "t.npz")
        assert isinstance(back, TModLearner) and back.ridge == 0.25

