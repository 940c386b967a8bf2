import numpy as np
import pytest

from maskrestore import autodiff as ad
from maskrestore import degrade, masking, models, pipeline, rng
from maskrestore.attribution import rank_and_select
from maskrestore.autodiff import Tensor
from maskrestore.pipeline import (
    AdamState,
    ScheduleSpec,
    TrainingDiverged,
    TrainSettings,
    adam_step,
    lr_at,
)


@pytest.fixture(scope="module")
def toy_pairs():
    return degrade.make_pair_batch(range(16), ("gaussian_noise",), size=16)


class TestSchedule:
    def test_endpoints(self):
        spec = ScheduleSpec(2e-4, 1e-6, 1000)
        assert lr_at(0, spec) == pytest.approx(2e-4, abs=1e-18)
        assert lr_at(1000, spec) == pytest.approx(1e-6, abs=1e-18)

    def test_midpoint(self):
        spec = ScheduleSpec(2e-4, 1e-6, 1000)
        assert lr_at(500, spec) == pytest.approx((2e-4 + 1e-6) / 2, rel=1e-12)

    def test_strictly_decreasing(self):
        spec = ScheduleSpec(2e-4, 1e-6, 200)
        values = [lr_at(s, spec) for s in range(201)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_step_bounds_checked(self):
        spec = ScheduleSpec(1e-3, 1e-5, 10)
        with pytest.raises(ValueError, match="outside"):
            lr_at(11, spec)

    def test_positive_rates_required(self):
        with pytest.raises(ValueError, match="positive"):
            ScheduleSpec(0.0, 1e-6, 10)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = models.ParamSet()
        p.add("g", w=Tensor(np.ones(3, dtype=np.float32), requires_grad=True))
        p.group("g")["w"].grad = np.zeros(3, dtype=np.float32)
        adam_step(p, AdamState(), 0.1)
        np.testing.assert_array_equal(p.group("g")["w"].data, np.ones(3, dtype=np.float32))

    def test_constant_gradient_approaches_lr_sign(self):
        p = models.ParamSet()
        p.add("g", w=Tensor(np.zeros(2, dtype=np.float64), requires_grad=True))
        state = AdamState()
        lr = 0.01
        for _ in range(400):
            p.group("g")["w"].grad = np.array([0.5, -2.0])
            before = p.group("g")["w"].data.copy()
            adam_step(p, state, lr)
        delta = p.group("g")["w"].data - before
        np.testing.assert_allclose(delta, [-lr, lr], rtol=1e-2)

    def test_frozen_group_bitwise_unchanged(self):
        p = models.ParamSet()
        p.add("a", w=Tensor(np.ones(3, dtype=np.float32), requires_grad=True))
        p.add("b", w=Tensor(np.ones(3, dtype=np.float32), requires_grad=True))
        models.set_trainable(p, ["b"], False)
        before = p.group_bytes("b")
        for _ in range(5):
            p.group("a")["w"].grad = np.full(3, 0.3, dtype=np.float32)
            p.group("b")["w"].grad = np.full(3, 0.3, dtype=np.float32)
            adam_step(p, AdamState(), 0.1)
        assert p.group_bytes("b") == before
        assert p.group_bytes("a") != before

    def test_nan_gradient_halts(self):
        p = models.ParamSet()
        p.add("g", w=Tensor(np.ones(2, dtype=np.float32), requires_grad=True))
        p.group("g")["w"].grad = np.array([np.nan, 1.0], dtype=np.float32)
        with pytest.raises(TrainingDiverged, match="non-finite gradient in group 'g'"):
            adam_step(p, AdamState(), 0.1)


class TestPretrain:
    def test_smoke_reduces_loss_and_is_deterministic(self, toy_pairs):
        settings = TrainSettings(steps=25, batch_size=4, seed=3)

        def run():
            r = models.build_restorer(seed=3)
            s = models.build_scorer(seed=3)
            return pipeline.pretrain(r, s, toy_pairs, settings)

        a = run()
        b = run()
        assert a.restoration_curve == b.restoration_curve  # bit-identical
        assert np.mean(a.restoration_curve[-5:]) < np.mean(a.restoration_curve[:5])

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError, match="empty training set"):
            pipeline.pretrain(models.build_restorer(seed=0), models.build_scorer(seed=0),
                              [], TrainSettings(steps=1))

    def test_checkpoint_callback_cadence(self, toy_pairs):
        r = models.build_restorer(seed=4)
        s = models.build_scorer(seed=4)
        seen = []
        settings = TrainSettings(steps=10, batch_size=4, seed=4, checkpoint_every=4)
        pipeline.pretrain(r, s, toy_pairs, settings, on_checkpoint=seen.append)
        assert seen == [4, 8]

    def test_divergence_halts(self, toy_pairs):
        r = models.build_restorer(seed=5)
        s = models.build_scorer(seed=5)
        settings = TrainSettings(steps=150, batch_size=4, seed=5, lr_max=2.0, lr_min=1.0)
        with pytest.raises(TrainingDiverged):
            pipeline.pretrain(r, s, toy_pairs, settings)


class TestFinetune:
    def test_k100_all_groups_may_change(self, toy_pairs):
        r = models.build_restorer(seed=6)
        before = {n: r.group_bytes(n) for n in r.names()}
        pipeline.finetune(r, toy_pairs, TrainSettings(steps=5, batch_size=4, seed=6))
        changed = [n for n in r.names() if r.group_bytes(n) != before[n]]
        assert len(changed) == len(r.names())

    def test_freeze_contract_with_report(self, toy_pairs):
        r = models.build_restorer(seed=7)
        scores = {name: float(i) for i, name in enumerate(r.names())}
        report = rank_and_select(scores, 30.0)
        before = {n: r.group_bytes(n) for n in r.names()}
        pipeline.finetune(r, toy_pairs, TrainSettings(steps=6, batch_size=4, seed=7),
                          report=report)
        selected = set(report.selected_names)
        assert len(selected) == int(np.ceil(0.3 * len(r.names())))
        for name in r.names():
            if name in selected:
                assert r.group_bytes(name) != before[name]
            else:
                assert r.group_bytes(name) == before[name]

    def test_report_model_mismatch_rejected(self, toy_pairs):
        r = models.build_restorer(seed=8)
        report = rank_and_select({"not-a-layer": 1.0}, 100.0)
        with pytest.raises(ValueError, match="mismatched groups"):
            pipeline.finetune(r, toy_pairs, TrainSettings(steps=1), report=report)

    def test_fusion_requires_extractor(self, toy_pairs):
        from maskrestore.fusion import build_fusion
        r = models.build_restorer(seed=9)
        with pytest.raises(ValueError, match="extractor"):
            pipeline.finetune(r, toy_pairs, TrainSettings(steps=1),
                              fusion_params=build_fusion(seed=9))


class TestTwinMaskInfer:
    def test_pixel_partition(self, gen):
        r = models.build_restorer(seed=10)
        img = gen.uniform(size=(3, 16, 16))
        plan = masking.sample_mask(np.full((16, 16), 1 / 256), 0.5, seed=4)
        out = pipeline.twin_mask_infer(r, img, plan.mask)
        pass_a = models.restorer_forward(
            r, Tensor(masking.apply_mask(img, plan.mask, 0.0).astype(np.float32))).data
        pass_b = models.restorer_forward(
            r, Tensor(masking.apply_mask(img, 1 - plan.mask, 0.0).astype(np.float32))).data
        np.testing.assert_array_equal(out[:, plan.mask == 1], pass_a[:, plan.mask == 1])
        np.testing.assert_array_equal(out[:, plan.mask == 0], pass_b[:, plan.mask == 0])

    def test_swap_symmetry(self, gen):
        r = models.build_restorer(seed=11)
        img = gen.uniform(size=(3, 16, 16))
        plan = masking.sample_mask(np.full((16, 16), 1 / 256), 0.5, seed=5)
        a = pipeline.twin_mask_infer(r, img, plan.mask)
        b = pipeline.twin_mask_infer(r, img, 1.0 - plan.mask)
        np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def eval_sets():
    return degrade.make_eval_sets(range(6), ("gaussian_noise", "jpeg"), size=16)


class TestEvaluate:
    def test_records_and_matrix(self, eval_sets):
        r = models.build_restorer(seed=12)
        result = pipeline.evaluate(r, eval_sets)
        assert {rec.kind for rec in result.records} == {"gaussian_noise", "jpeg"}
        assert all(rec.n == 6 for rec in result.records)
        assert result.cka_matrix.shape == (2, 2)
        np.testing.assert_allclose(np.diag(result.cka_matrix), 1.0, atol=1e-12)

    def test_single_kind_variance_zero(self, eval_sets):
        r = models.build_restorer(seed=12)
        result = pipeline.evaluate(r, {"jpeg": eval_sets["jpeg"]})
        assert result.psnr_variance == 0.0 and result.ssim_variance == 0.0

    def test_deterministic_records(self, eval_sets):
        r = models.build_restorer(seed=13)
        a = pipeline.evaluate(r, eval_sets)
        b = pipeline.evaluate(r, eval_sets)
        assert a.records == b.records

    def test_empty_rejected(self):
        r = models.build_restorer(seed=12)
        with pytest.raises(ValueError, match="no test sets"):
            pipeline.evaluate(r, {})
        with pytest.raises(ValueError, match="empty test set"):
            pipeline.evaluate(r, {"jpeg": []})


class TestMacRankRestorer:
    def test_report_covers_all_groups(self, toy_pairs):
        r = models.build_restorer(seed=14)
        s = models.build_scorer(seed=14)
        report = pipeline.mac_rank_restorer(r, s, toy_pairs[:3], steps=8, seed=14)
        assert set(report.names()) == set(r.names())
        assert len(report.selected_names) == int(np.ceil(0.3 * len(r.names())))

    def test_empty_probe_rejected(self):
        r = models.build_restorer(seed=15)
        s = models.build_scorer(seed=15)
        with pytest.raises(ValueError, match="empty probe"):
            pipeline.mac_rank_restorer(r, s, [], steps=8)
