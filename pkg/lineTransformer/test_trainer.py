"""
训练与评测流程测试

整网训练较慢，学习效果测试标记为 slow，默认不运行：
   pytest lineTransformer/test_trainer.py -v
   pytest lineTransformer/test_trainer.py -v -m slow
"""

import json

import numpy as np
import pytest

from . import trainer as trainer_module
from .autograd import Tensor, parameter
from .config import OptimConfig, RunConfig, RunSettings
from .exceptions import ConfigurationError, InputError, TrainingDivergedError
from .losses import LossBreakdown, LossConfig
from .models import EvalReport, Stage
from .network import LineTransformer, ModelConfig
from .synth import SynthConfig, generate_dataset
from .test_network import tiny_config
from .trainer import (
    AdamW,
    BEST_CHECKPOINT,
    LAST_CHECKPOINT,
    LOG_FILE,
    clip_grad_norm,
    evaluate,
    load_coarse_checkpoint,
    lr_at_epoch,
    new_state,
    train_stage_coarse,
    train_stage_fine,
    write_report,
)


def run_config(**optim) -> RunConfig:
    values = dict(coarse_epochs=1, fine_epochs=1, joint_epochs=1, batch_size=2, patience=0)
    values.update(optim)
    return RunConfig(
        model=tiny_config(),
        synth=SynthConfig(extent=32),
        optim=OptimConfig(**values),
        run=RunSettings(eval_interval=0, show_progress=False),
    )


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SynthConfig(extent=32), 3, prefix="d")


def snapshot(params):
    return [p.data.copy() for p in params]


class TestOptimizer:
    """AdamW、梯度裁剪与学习率"""

    def test_step_decay(self):
        config = OptimConfig()
        assert lr_at_epoch(config, 0, 200) == 1e-4
        assert lr_at_epoch(config, 199, 200) == 1e-4
        assert lr_at_epoch(config, 200, 200) == pytest.approx(1e-5)
        assert lr_at_epoch(config, 400, 200) == pytest.approx(1e-6)

    def test_clip_grad_norm(self):
        p = parameter(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    def test_clip_disabled(self):
        p = parameter(np.zeros(2))
        p.grad = np.array([3.0, 4.0])
        clip_grad_norm([p], 0.0)
        np.testing.assert_array_equal(p.grad, [3.0, 4.0])

    def test_first_adam_step_moves_by_lr(self):
        p = parameter(np.array([1.0, -1.0]))
        optimizer = AdamW({"p": p}, OptimConfig(weight_decay=0.0))
        p.grad = np.array([0.5, -2.0])
        optimizer.step(0.01)
        np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-9)

    def test_parameters_without_gradient_untouched(self):
        p = parameter(np.array([1.0]))
        optimizer = AdamW({"p": p}, OptimConfig())
        optimizer.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0])


class TestStages:
    """两阶段训练"""

    def test_zero_epochs_leaves_parameters(self, data):
        model = LineTransformer(tiny_config(), seed=0)
        before = snapshot(model.parameters())
        state = train_stage_coarse(model, data, run_config(coarse_epochs=0))
        assert state.epoch == 0
        for a, b in zip(before, model.parameters()):
            np.testing.assert_array_equal(a, b.data)

    def test_coarse_epoch_updates_only_coarse_and_heads(self, data):
        model = LineTransformer(tiny_config(), seed=0)
        fine_before = snapshot(model.fine_parameters())
        head_before = snapshot(model.head_parameters())
        state = train_stage_coarse(model, data, run_config())
        assert (state.epoch, state.step) == (1, 2)
        for a, b in zip(fine_before, model.fine_parameters()):
            np.testing.assert_array_equal(a, b.data)
        assert any(not np.array_equal(a, b.data) for a, b in zip(head_before, model.head_parameters()))

    def test_fine_stage_freezes_coarse_bitwise(self, data):
        model = LineTransformer(tiny_config(), seed=0)
        config = run_config()
        coarse_state = train_stage_coarse(model, data, config)
        coarse_before = snapshot(model.coarse_parameters())
        train_stage_fine(model, data, config, coarse_state)
        for a, b in zip(coarse_before, model.coarse_parameters()):
            np.testing.assert_array_equal(a, b.data)

    def test_fine_decoder_starts_from_coarse_decoder(self, data):
        model = LineTransformer(tiny_config(), seed=0)
        config = run_config(fine_epochs=0)
        coarse_state = train_stage_coarse(model, data, config)
        train_stage_fine(model, data, config, coarse_state)
        for coarse, fine in zip(model.coarse_decoder, model.fine_decoder):
            for (name, a), (_, b) in zip(coarse.named_parameters(), fine.named_parameters()):
                np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_fine_stage_requires_coarse_state(self, data):
        model = LineTransformer(tiny_config(), seed=0)
        with pytest.raises(ConfigurationError):
            train_stage_fine(model, data, run_config())
        joint_state = new_state(model, Stage.JOINT, run_config())
        with pytest.raises(ConfigurationError):
            train_stage_fine(model, data, run_config(), joint_state)

    def test_focal_gamma_switch_is_logged(self, data, tmp_path):
        model = LineTransformer(tiny_config(), seed=0)
        config = run_config(fine_epochs=3)
        config.loss = LossConfig(main_gamma=0.0, focal_gamma=2.0, focal_epochs=1)
        coarse_state = train_stage_coarse(model, data, config)
        train_stage_fine(model, data, config, coarse_state, run_dir=tmp_path)
        records = [json.loads(line) for line in (tmp_path / LOG_FILE).read_text().splitlines()]
        assert [r["gamma"] for r in records] == [0.0, 0.0, 2.0]
        assert all(r["stage"] == "fine" for r in records)

    def test_default_schedule_ends_in_focal_epochs(self):
        defaults = RunConfig()
        total = defaults.optim.fine_epochs
        gammas = [defaults.loss.focal_for_epoch(epoch, total).gamma for epoch in range(total)]
        assert gammas[:total - 25] == [0.0] * (total - 25)
        assert gammas[total - 25:] == [2.0] * 25

    def test_default_loss_config_logs_focal_tail(self, data, tmp_path):
        model = LineTransformer(tiny_config(), seed=0)
        config = run_config(fine_epochs=26)
        assert config.loss == RunConfig().loss
        coarse_state = train_stage_coarse(model, data[:2], config)
        train_stage_fine(model, data[:2], config, coarse_state, run_dir=tmp_path)
        records = [json.loads(line) for line in (tmp_path / LOG_FILE).read_text().splitlines()]
        assert [r["gamma"] for r in records] == [0.0] + [2.0] * 25

    def test_per_layer_eval_setting_reaches_evaluation(self, data, monkeypatch):
        calls = []
        report = EvalReport(sap={10.0: 0.5, 15.0: 0.5}, sf={10.0: 0.5, 15.0: 0.5}, ap_h=0.5, f_h=0.5)

        def fake_evaluate(*args, **kwargs):
            calls.append(kwargs)
            return report, None

        monkeypatch.setattr(trainer_module, "evaluate", fake_evaluate)
        config = run_config()
        config.run.eval_interval = 1
        config.run.per_layer_eval = True
        train_stage_coarse(LineTransformer(tiny_config(), seed=0), data, config, eval_data=data)
        assert calls and all(call["per_layer"] for call in calls)

    def test_same_seed_same_parameters(self, data):
        results = []
        for _ in range(2):
            model = LineTransformer(tiny_config(), seed=3)
            train_stage_coarse(model, data, run_config(coarse_epochs=2))
            results.append(snapshot(model.parameters()))
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)

    def test_empty_training_set(self):
        with pytest.raises(InputError):
            train_stage_coarse(LineTransformer(tiny_config(), seed=0), [], run_config())

    def test_non_finite_loss_raises(self, data, monkeypatch):
        monkeypatch.setattr(trainer_module, "total_loss",
                            lambda *args, **kwargs: (Tensor(float("nan")), LossBreakdown()))
        with pytest.raises(TrainingDivergedError) as info:
            train_stage_coarse(LineTransformer(tiny_config(), seed=0), data, run_config())
        assert info.value.step == 0


class TestCheckpointing:
    """检查点与续训"""

    def test_resume_is_bitwise(self, data, tmp_path):
        uninterrupted = LineTransformer(tiny_config(), seed=1)
        train_stage_coarse(uninterrupted, data, run_config(coarse_epochs=2))

        first = LineTransformer(tiny_config(), seed=1)
        train_stage_coarse(first, data, run_config(coarse_epochs=1), run_dir=tmp_path)
        config = run_config(coarse_epochs=2)
        model, state = load_coarse_checkpoint(tmp_path / LAST_CHECKPOINT, config)
        assert (state.epoch, state.step) == (1, 2)
        train_stage_coarse(model, data, config, resume=state)
        for (name, a), (_, b) in zip(uninterrupted.named_parameters(), model.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    def test_fine_checkpoint_is_not_a_coarse_checkpoint(self, data, tmp_path):
        model = LineTransformer(tiny_config(), seed=0)
        config = run_config()
        coarse_state = train_stage_coarse(model, data, config)
        train_stage_fine(model, data, config, coarse_state, run_dir=tmp_path)
        with pytest.raises(ConfigurationError):
            load_coarse_checkpoint(tmp_path / LAST_CHECKPOINT, config)

    def test_missing_coarse_checkpoint(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_coarse_checkpoint(tmp_path / "absent.npz", run_config())

    def test_early_stopping_keeps_best(self, data, tmp_path, monkeypatch):
        report = EvalReport(sap={10.0: 0.5, 15.0: 0.5}, sf={10.0: 0.5, 15.0: 0.5}, ap_h=0.5, f_h=0.5)
        monkeypatch.setattr(trainer_module, "evaluate", lambda *args, **kwargs: (report, None))
        config = run_config(coarse_epochs=5, patience=1)
        config.run.eval_interval = 1
        state = train_stage_coarse(LineTransformer(tiny_config(), seed=0), data, config,
                                   run_dir=tmp_path, eval_data=data)
        assert state.epoch == 2
        assert (state.best_score, state.best_epoch) == (0.5, 1)
        assert (tmp_path / BEST_CHECKPOINT).exists()
        assert (tmp_path / LAST_CHECKPOINT).exists()


class TestEvaluate:
    """评测"""

    def test_empty_dataset(self):
        with pytest.raises(InputError):
            evaluate(LineTransformer(tiny_config(), seed=0), [])

    def test_report_and_files(self, data, tmp_path):
        report, raw = evaluate(LineTransformer(tiny_config(), seed=0), data, per_layer=True)
        assert len(report.per_layer_sap) == 4
        assert all(0.0 <= v <= 1.0 for v in report.sap.values())
        names = sorted(p.name for p in write_report(report, raw, tmp_path))
        assert names == ["pr_aph.csv", "pr_sap10.csv", "pr_sap15.csv", "raw_matches.npz", "report.json"]
        assert set(json.loads((tmp_path / "report.json").read_text())) >= {"sAP10", "sAP15", "APH", "FH"}


@pytest.fixture(scope="module")
def memorized():
    """桌面规模模型在单张场景上训练 200 步"""
    sample = generate_dataset(SynthConfig(extent=64, noise=0.0, max_segments=2), 1)
    config = RunConfig(
        model=ModelConfig(dropout=0.0),
        synth=SynthConfig(extent=64, hflip=False, vflip=False),
        optim=OptimConfig(coarse_epochs=200, batch_size=1, lr=3e-3, weight_decay=0.0, clip_norm=0.0,
                          coarse_decay_interval=150, patience=0),
        run=RunSettings(eval_interval=0, show_progress=False),
    )
    model = LineTransformer(config.model, seed=0)
    state = train_stage_coarse(model, sample, config)
    return model, state, sample


@pytest.mark.slow
class TestLearning:
    """单场景过拟合"""

    def test_loss_drops_tenfold_within_200_steps(self, memorized):
        _, state, _ = memorized
        history = state.loss_history
        assert len(history) == 200
        assert history[0] / history[-1] >= 10

    def test_memorized_scene_is_recovered(self, memorized):
        model, _, sample = memorized
        report, _ = evaluate(model, sample, use_fine=False)
        assert report.sap[10.0] == pytest.approx(1.0)
