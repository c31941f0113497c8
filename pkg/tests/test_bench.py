import math

import numpy as np
import pytest

from omdl import bench
from omdl.bench import (ExperimentRecord, GenConfig, atom_recovery, draw_sample,
                        generate_instance, mse, run_experiment, steps_to_recovery, summarize)
from omdl.learner import project_unit_columns
from omdl.tensor import tucker_reconstruct

TINY = dict(modes=3, rows=4, atoms=6, sparsity=2, trials=2, steps=15, seed=7)


class TestGenerator:
    def test_noise_free(self, rng):
        cfg = GenConfig(rows=4, atoms=6, sparsity=3, snr=math.inf)
        dicts, _ = generate_instance(cfg, rng)
        X, core = draw_sample(cfg, dicts, rng)
        assert core.nnz == 3
        np.testing.assert_array_equal(X, tucker_reconstruct(core.to_dense(), dicts))

    def test_unit_columns(self, rng):
        dicts, _ = generate_instance(GenConfig(rows=4, atoms=6), rng)
        for D in dicts:
            np.testing.assert_allclose(np.linalg.norm(D, axis=0), 1.0, atol=1e-12)

    def test_pure_noise(self, rng):
        cfg = GenConfig(rows=4, atoms=6, sparsity=0, snr=20.0)
        dicts, stream = generate_instance(cfg, rng)
        powers = [np.mean(next(stream)[0] ** 2) for _ in range(400)]
        assert np.mean(powers) == pytest.approx(cfg.noise_ratio() / 64, rel=0.05)

    def test_empirical_snr(self, rng):
        cfg = GenConfig(rows=6, atoms=9, sparsity=4, snr=50.0)
        dicts, _ = generate_instance(cfg, rng)
        sig = noise = 0.0
        for _ in range(1000):
            X, core = draw_sample(cfg, dicts, rng)
            clean = tucker_reconstruct(core.to_dense(), dicts)
            sig += np.sum(clean ** 2)
            noise += np.sum((X - clean) ** 2)
        assert 10 * np.log10(sig / noise) == pytest.approx(50.0, abs=0.5)

    def test_linear_snr(self):
        assert GenConfig(snr=100.0, snr_db=False).noise_ratio() == 0.01
        assert GenConfig(snr=20.0).noise_ratio() == pytest.approx(0.01)

    @pytest.mark.parametrize("kw", [dict(rows=20, atoms=20), dict(sparsity=1000),
                                    dict(trials=0), dict(snr=-1.0, snr_db=False)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            GenConfig(**kw)


class TestMetrics:
    def test_mse(self):
        assert mse(np.zeros((2, 2))) == 0.0
        assert mse(np.ones((2, 3, 4))) == 1.0
        assert mse(np.array([3.0, 4.0])) == 12.5

    def test_recovery_identity(self, rng):
        D = project_unit_columns(rng.standard_normal((5, 8)))[0]
        assert atom_recovery(D, D) == 1.0

    def test_recovery_sign_permutation(self, rng):
        D = project_unit_columns(rng.standard_normal((5, 8)))[0]
        perm = rng.permutation(8)
        signs = rng.choice([-1.0, 1.0], 8)
        assert atom_recovery(D[:, perm] * signs, D) == 1.0
        assert atom_recovery(3.0 * D, D) == 1.0

    def test_recovery_partial(self, rng):
        D = project_unit_columns(rng.standard_normal((10, 20)))[0]
        est = D.copy()
        for j in range(5):
            while True:
                v = rng.standard_normal(10)
                v /= np.linalg.norm(v)
                if np.max(np.abs(D.T @ v)) < 0.95:
                    break
            est[:, j] = v
        assert atom_recovery(est, D) == 0.75

    def test_recovery_non_finite(self, rng):
        D = project_unit_columns(rng.standard_normal((3, 4)))[0]
        assert atom_recovery(np.full_like(D, np.nan), D) == 0.0


class TestRuns:
    def test_oracle_fixed_point(self):
        gen = GenConfig(**dict(TINY, snr=math.inf))
        trials = run_experiment(gen, gen.learner_config(), "omdl-qn", coding="oracle",
                                init="truth")
        for t in trials:
            for r in t:
                assert r.mse <= 1e-20
                assert r.recovery == 1.0

    @pytest.mark.parametrize("algo", bench.ALGOS)
    def test_deterministic(self, algo):
        gen = GenConfig(**TINY)
        a = run_experiment(gen, gen.learner_config(), algo, ridge=1e-6)
        b = run_experiment(gen, gen.learner_config(), algo, ridge=1e-6)
        assert [r.row() for t in a for r in t] == [r.row() for t in b for r in t]

    def test_workers_match_serial(self):
        gen = GenConfig(**TINY)
        a = run_experiment(gen, gen.learner_config(), "omdl-sd")
        b = run_experiment(gen, gen.learner_config(), "omdl-sd", workers=2)
        assert [r.row() for t in a for r in t] == [r.row() for t in b for r in t]

    def test_trials_differ(self):
        gen = GenConfig(**TINY)
        a, b = run_experiment(gen, gen.learner_config(), "omdl-qn")
        assert a[-1].mse != b[-1].mse

    def test_truncate_on_divergence(self):
        gen = GenConfig(**dict(TINY, rows=5, atoms=10))
        trials = run_experiment(gen, gen.learner_config(), "tmod", on_divergence="truncate")
        for t in trials:
            assert t[-1].diverged and len(t) < gen.steps
        summary = summarize(trials)
        assert summary[-1]["diverged_fraction"] == 1.0

    def test_progress_counts_all_steps(self):
        gen = GenConfig(**TINY)
        seen = []
        run_experiment(gen, gen.learner_config(), "tmod", on_divergence="truncate",
                       progress=seen.append)
        assert sum(seen) == gen.trials * gen.steps


def rec(trial, step, mse_, recovery, diverged=False):
    return ExperimentRecord(trial, step, "x", mse_, recovery, 1.0, 0.5, diverged)


class TestSummary:
    def test_means(self):
        trials = [[rec(0, 1, 1.0, 0.0), rec(0, 2, 2.0, 0.5)],
                  [rec(1, 1, 3.0, 1.0), rec(1, 2, math.nan, 0.0, True)]]
        s = summarize(trials)
        assert [r["mse"] for r in s] == [2.0, 2.0]
        assert [r["recovery"] for r in s] == [0.5, 0.25]
        assert [r["diverged_fraction"] for r in s] == [0.0, 0.5]

    def test_truncated_counts_as_diverged(self):
        s = summarize([[rec(0, 1, 1.0, 1.0), rec(0, 2, 1.0, 1.0)], [rec(1, 1, 1.0, 1.0)]])
        assert s[1]["recovery"] == 0.5 and s[1]["diverged_fraction"] == 0.5

    def test_steps_to_recovery(self):
        s = [{"step": i + 1, "recovery": r} for i, r in enumerate([0.1, 0.5, 0.85, 0.7, 0.9])]
        assert steps_to_recovery(s, 0.8) == 3.0
        assert steps_to_recovery(s, 0.95) == math.inf

    def test_csv_round_trip(self, tmp_path):
        trials = [[rec(0, 1, 0.1, 0.25), rec(0, 2, math.nan, 0.0, True)]]
        bench.write_records_csv(tmp_path / "r.csv", trials)
        back = bench.read_records_csv(tmp_path / "r.csv")
        assert [r.row() for r in back] == [r.row() for r in trials[0]]
        s = summarize(trials)
        bench.write_summary_csv(tmp_path / "s.csv", s)
        s2 = bench.read_summary_csv(tmp_path / "s.csv")
        assert s2[0] == s[0]
        assert math.isnan(s2[1]["mse"])
