import math

import numpy as np
import pytest

from t2mhn.baseline import SingularSystemError, baseline_fixed_rep, cosine_predict, ridge_fit
from t2mhn.checks import check_equivariance
from t2mhn.engine import (
    MetricsReport,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    full_report,
    run_protocol,
    select_tasks,
    train,
)
from t2mhn.episodes import ClassPool, SyntheticConfig, gen_synthetic
from t2mhn.hypernet import TargetSpec, init_hypernet, init_nonev
from t2mhn.metrics import mean_and_sem

TINY = SyntheticConfig(feature_dim=4, descriptor_dim=5, n_classes=16, n_seen=10, n_unseen=6,
                       samples_per_class=20, sigma_x=0.4, sigma_s=0.02, seed=2)


@pytest.fixture(scope="module")
def tiny():
    return gen_synthetic(TINY)


def quick(**kw):
    base = dict(seed=0, epochs=3, tasks_per_epoch=20, batch_size=16, trunk_widths=[8])
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_requires_seed(self):
        with pytest.raises(ValueError, match="seed"):
            TrainConfig.from_dict({"epochs": 3})

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"seed": 0, "lr": 0.1})

    @pytest.mark.parametrize("bad", [dict(k_train=1), dict(kind="mlp"), dict(epochs=0),
                                     dict(momentum=1.0), dict(task="one_class", k_train=2),
                                     dict(target_layers=3)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            quick(**bad)

    def test_grid_report(self):
        assert quick(learning_rate=0.01, epochs=50, batch_size=32, trunk_widths=[50]).off_grid() == []
        assert "learning_rate" in quick(learning_rate=0.02).off_grid()


class TestTrain:
    def test_zero_lr_leaves_params(self, tiny):
        cfg = quick(learning_rate=0.0)
        params, _ = train(cfg, tiny[0])
        init = init_hypernet(cfg.target_spec(4), cfg.trunk_widths, cfg.seed, 5)
        np.testing.assert_array_equal(params.flatten(), init.flatten())

    def test_deterministic(self, tiny):
        a, la = train(quick(), tiny[0])
        b, lb = train(quick(), tiny[0])
        np.testing.assert_array_equal(a.flatten(), b.flatten())
        assert [r["mean_loss"] for r in la] == [r["mean_loss"] for r in lb]

    def test_log_records(self, tiny):
        seen = []
        _, log = train(quick(), tiny[0], callback=seen.append)
        assert seen == log and [r["epoch"] for r in log] == [0, 1, 2]
        assert set(log[0]) == {"epoch", "mean_loss", "wall_ms"}

    def test_separable_pool_reaches_low_loss(self):
        pool, _ = gen_synthetic(SyntheticConfig(n_classes=20, n_seen=16, n_unseen=4, samples_per_class=40,
                                                sigma_x=0.2, sigma_s=0.01, seed=1))
        _, log = train(TrainConfig(seed=0, epochs=20), pool)
        assert log[-1]["mean_loss"] < 0.1

    def test_divergence_keeps_last_good(self, tiny):
        with pytest.raises(TrainingDiverged) as exc:
            train(quick(learning_rate=1e200, momentum=0.0, epochs=5), tiny[0])
        assert np.all(np.isfinite(exc.value.last_good.flatten()))

    @pytest.mark.parametrize("kw", [dict(kind="nonev"), dict(target_layers=2, hidden_dim=3),
                                    dict(pooling="mean"), dict(task="one_class", k_train=1),
                                    dict(normalize_descriptors=False)])
    def test_variants_run(self, kw, tiny):
        params, log = train(quick(**kw), tiny[0])
        assert all(math.isfinite(r["mean_loss"]) for r in log)


def constant_predictor(descriptors):
    return lambda X: np.zeros(len(X), dtype=int)


class TestProtocol:
    def test_stub_predicting_zero(self, tiny):
        res = run_protocol(tiny[0], 2, "unseen", constant_predictor)
        assert res.mean == pytest.approx(0.5)
        assert all(t.accuracy == 0.5 for t in res.tasks)

    def test_ten_unseen_classes_give_45_tasks(self):
        pool, _ = gen_synthetic(SyntheticConfig(feature_dim=2, descriptor_dim=2, n_classes=14, n_seen=4,
                                                n_unseen=10, samples_per_class=4, seed=0))
        res = run_protocol(pool, 2, "unseen", constant_predictor)
        assert len(res.tasks) == 45 and res.enumerated and res.n_possible == 45

    def test_sampling_beyond_cap(self, tiny):
        tasks, n_possible, enumerated = select_tasks(tiny[0], 3, "seen", max_tasks=50)
        assert n_possible == math.comb(10, 3) and not enumerated
        assert len({t.class_ids for t in tasks}) == 50
        assert tasks == select_tasks(tiny[0], 3, "seen", max_tasks=50)[0]

    def test_sem_recomputable(self, tiny):
        params = init_hypernet(TargetSpec(4), [8], 0, 5)
        res = evaluate(params, tiny[0], 2, "seen")
        mean, sem = mean_and_sem([t.accuracy for t in res.tasks])
        assert (res.mean, res.sem) == (mean, sem)
        d = res.to_dict()
        assert d["n_tasks"] == 45 and len(d["tasks"]) == 45

    def test_threads_identical(self, tiny):
        params = init_hypernet(TargetSpec(4), [8], 0, 5)
        a = full_report(params, tiny[0], 2, threads=1).to_dict()
        b = full_report(params, tiny[0], 2, threads=4).to_dict()
        assert a == b

    def test_relabel_invariance(self, tiny):
        pool, _ = tiny
        params = init_hypernet(TargetSpec(4), [8], 0, 5)
        rename = {c: f"z{i:02d}" for i, c in enumerate(reversed(pool.class_ids))}
        renamed = ClassPool({rename[c]: d for c, d in pool.descriptors.items()},
                            {rename[c]: f for c, f in pool.features.items()},
                            {rename[c]: t for c, t in pool.row_tags.items()},
                            type(pool.partition)(tuple(rename[c] for c in pool.partition.seen),
                                                 tuple(rename[c] for c in pool.partition.unseen)))
        for split in ("seen", "unseen"):
            a = evaluate(params, pool, 2, split)
            b = evaluate(params, renamed, 2, split)
            assert a.mean == b.mean and a.sem == b.sem

    def test_variable_k(self, tiny):
        params, _ = train(quick(), tiny[0])
        res = evaluate(params, tiny[0], 3, "unseen")
        assert len(res.tasks) == math.comb(6, 3)

    def test_report_harmonic(self, tiny):
        rep = full_report(init_hypernet(TargetSpec(4), [8], 0, 5), tiny[0], 2)
        assert isinstance(rep, MetricsReport)
        assert rep.harmonic == pytest.approx(2 * rep.seen_acc * rep.unseen_acc / (rep.seen_acc + rep.unseen_acc))
        assert "wall" not in str(rep.to_dict())

    def test_k_too_large(self, tiny):
        with pytest.raises(ValueError):
            evaluate(init_hypernet(TargetSpec(4), [8], 0, 5), tiny[0], 7, "unseen")


class TestEquivarianceCheck:
    def test_equivariant_passes(self):
        hn = init_hypernet(TargetSpec(4, 2, 3), [8], 0, 5, head_scale=1.0)
        rep = check_equivariance(hn, trials=30)
        assert rep.passed and max(rep.last_dev, rep.pen_dev, rep.output_dev) <= 1e-9

    def test_nonev_fails_with_witness(self):
        ne = init_nonev(TargetSpec(4), 3, [8], 0, 5)
        rep = check_equivariance(ne, trials=30, k_list=(2, 3, 5))
        assert not rep.passed and rep.last_dev > 1e-6
        assert rep.skipped_k == [2, 5] and rep.witness["k"] == 3

    def test_k1_trivial(self):
        ne = init_nonev(TargetSpec(4), 1, [8], 0, 5)
        assert check_equivariance(ne, trials=10, k_list=(1,)).passed

    def test_zero_tolerance_fails(self):
        hn = init_hypernet(TargetSpec(4, 2, 3), [8], 0, 5, head_scale=1.0)
        rep = check_equivariance(hn, trials=50, tolerance=0.0)
        assert not rep.passed and 0 < max(rep.last_dev, rep.output_dev) <= 1e-9


class TestBaseline:
    def test_ridge_vs_normal_equations(self, rng):
        X = rng.standard_normal((5, 5))
        Y = rng.standard_normal((5, 3))
        lam = 0.3
        direct = np.linalg.solve(X.T @ X + lam * np.eye(5), X.T @ Y)
        assert np.max(np.abs(ridge_fit(X, Y, lam) - direct)) <= 1e-10

    def test_singular_without_ridge(self):
        X = np.ones((4, 3))
        with pytest.raises(SingularSystemError, match="lambda > 0"):
            ridge_fit(X, np.ones((4, 2)), 0.0)

    def test_infinite_ridge_is_chance(self, tiny):
        _, rep = baseline_fixed_rep(tiny[0], "text->visual", 1e300)
        assert rep.unseen_acc == pytest.approx(0.5)

    def test_noiseless_recovery(self):
        cfg = SyntheticConfig(feature_dim=6, descriptor_dim=6, n_classes=30, n_seen=20, n_unseen=10,
                              samples_per_class=50, sigma_x=0.05, sigma_s=0.0, seed=5)
        pool, oracle = gen_synthetic(cfg)
        assert np.linalg.matrix_rank(oracle.projection) == 6
        _, rep = baseline_fixed_rep(pool, "text->visual", 1e-9)
        assert rep.unseen_acc >= 0.99

    def test_visual_to_text_runs(self, tiny):
        _, rep = baseline_fixed_rep(tiny[0], "visual->text", 1.0)
        assert 0.5 < rep.unseen_acc <= 1.0

    def test_cosine_zero_vectors(self):
        np.testing.assert_array_equal(cosine_predict(np.ones((2, 3)), np.zeros((2, 3))), [0, 0])
