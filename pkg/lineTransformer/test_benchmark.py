"""
桌面规模基准测试

默认只跑配置展开、趋势判定和一个极小规模的流程；整套基准标记为 slow：
   pytest lineTransformer/test_benchmark.py -v
   pytest lineTransformer/test_benchmark.py -v -m slow
"""

import json

import pytest

from .benchmark import BenchmarkConfig, BenchmarkReport, run_benchmark
from .cli import main
from .exceptions import ParameterError
from .test_network import tiny_config


def smoke_config(**overrides) -> BenchmarkConfig:
    values = dict(model=tiny_config(), num_train=2, num_eval=1, extent=32, coarse_epochs=1,
                  fine_epochs=1, focal_epochs=1, batch_size=2)
    values.update(overrides)
    return BenchmarkConfig(**values)


class TestBenchmarkConfig:
    """配置展开"""

    def test_threshold_on_the_image_grid(self):
        run = BenchmarkConfig().run_config()
        assert run.metric.thresholds == (5.0,)
        assert run.metric.structural_extent == 64
        assert run.synth.extent == 64
        assert (run.model.d_model, run.model.num_heads, run.model.num_entities) == (64, 4, 50)

    def test_joint_run_gets_the_same_epoch_budget(self):
        run = BenchmarkConfig(coarse_epochs=7, fine_epochs=3).run_config()
        assert run.optim.joint_epochs == 10
        assert run.optim.patience == 0
        assert run.run.eval_interval == 0
        assert run.run.per_layer_eval

    @pytest.mark.parametrize("overrides", [
        {"num_train": 0},
        {"threshold": 0.0},
        {"sap_bar": 1.5},
        {"layer_tolerance": -0.1},
    ])
    def test_invalid_config(self, overrides):
        with pytest.raises(ParameterError):
            BenchmarkConfig(**overrides)


class TestChecks:
    """趋势判定"""

    def test_all_trends_hold(self):
        report = BenchmarkReport(coarse_sap=0.7, fine_sap=0.85, per_layer_sap=[0.6, 0.7, 0.8, 0.85], joint_sap=0.5)
        assert all(report.checks(BenchmarkConfig()).values())

    def test_small_layer_dip_is_tolerated(self):
        report = BenchmarkReport(coarse_sap=0.7, fine_sap=0.85, per_layer_sap=[0.6, 0.59, 0.8, 0.85])
        checks = report.checks(BenchmarkConfig())
        assert checks["layers_non_decreasing"]
        assert "staged_not_below_joint" not in checks

    def test_each_failure_is_reported(self):
        report = BenchmarkReport(coarse_sap=0.7, fine_sap=0.6, per_layer_sap=[0.7, 0.6], joint_sap=0.65)
        checks = report.checks(BenchmarkConfig())
        assert checks == {
            "sap_bar": False,
            "fine_not_below_coarse": False,
            "layers_non_decreasing": False,
            "staged_not_below_joint": False,
        }
        assert report.to_dict(BenchmarkConfig())["passed"] is False


class TestSmokeRun:
    """极小规模跑通整条流程"""

    def test_report_and_run_directories(self, tmp_path):
        report = run_benchmark(smoke_config(), tmp_path)
        assert len(report.per_layer_sap) == 4
        assert report.joint_sap is not None
        for value in [report.coarse_sap, report.fine_sap, report.joint_sap, *report.per_layer_sap]:
            assert 0.0 <= value <= 1.0
        for stage in ("coarse", "fine", "joint"):
            assert (tmp_path / stage / "last.npz").exists()

    def test_without_joint(self):
        report = run_benchmark(smoke_config(joint=False))
        assert report.joint_sap is None

    def test_cli_writes_summary(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("d_model: 8\nnum_heads: 2\ncoarse_encoder_layers: 1\ncoarse_decoder_layers: 1\n"
                          "fine_encoder_layers: 1\nfine_decoder_layers: 1\nnum_entities: 5\nff_dim: 16\n"
                          "dropout: 0.0\nstem_channels: 4\nbackbone_channels: [4, 4, 8, 8]\n", encoding="utf-8")
        code = main(["bench", "--config", str(config), "--out", str(tmp_path / "bench"), "--num-train", "2",
                     "--num-eval", "1", "--extent", "32", "--coarse-epochs", "1", "--fine-epochs", "1",
                     "--no-joint"])
        assert code == 0
        summary = json.loads((tmp_path / "bench" / "benchmark.json").read_text())
        assert summary["threshold"] == 5.0
        assert len(summary["per_layer_sAP"]) == 2
        assert summary["joint_sAP"] is None
        assert set(summary["checks"]) == {"sap_bar", "fine_not_below_coarse", "layers_non_decreasing"}


@pytest.mark.slow
class TestDeskBenchmark:
    """200/50 张 64×64 场景、桌面规模模型：sAP5 ≥ 0.80，并且分阶段趋势成立"""

    def test_trends(self, tmp_path):
        config = BenchmarkConfig()
        report = run_benchmark(config, tmp_path)
        assert report.checks(config) == {
            "sap_bar": True,
            "fine_not_below_coarse": True,
            "layers_non_decreasing": True,
            "staged_not_below_joint": True,
        }
