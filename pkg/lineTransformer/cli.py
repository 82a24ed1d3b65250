"""命令行入口

子命令：
    synth    生成合成训练/评测数据集
    train    训练（--stage coarse|fine|joint）
    eval     评测检查点（或现成的预测文件），写 report.json 与 pr_*.csv
    predict  对单张图像推理，输出标注格式的预测
    curves   由 raw_matches.npz 重新导出 PR 曲线
    bench    桌面规模基准：两阶段训练 + 联合训练对照，检查 sAP 门槛与分阶段趋势

每个子命令返回 Result，main 负责转换成退出码。
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .benchmark import BenchmarkConfig, run_benchmark
from .checkpoint import load_checkpoint
from .config import RunConfig, dump_config, load_config
from .error_types import ErrorCode
from .exceptions import ConfigurationError, InputError, LineTransformerException
from .metrics import RawMatchData, evaluate_predictions, export_pr_curve, read_segments_jsonl
from .models import Stage
from .network import LineTransformer, inference_filter
from .result import Result
from .synth import generate_dataset, load_dataset, save_dataset
from .trainer import (
    LAST_CHECKPOINT,
    evaluate,
    load_coarse_checkpoint,
    predict_layers,
    restore_state,
    train_joint,
    train_stage_coarse,
    train_stage_fine,
    write_report,
)

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], Result[Any]]


def _config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def cmd_synth(args: argparse.Namespace) -> Result[Dict[str, Any]]:
    config = _config(args)
    num_train = args.num_train if args.num_train is not None else config.run.num_train
    num_eval = args.num_eval if args.num_eval is not None else config.run.num_eval
    out = Path(args.out)
    seed = config.synth.seed
    save_dataset(generate_dataset(config.synth, num_train, prefix="train", seed=seed), out / "train")
    save_dataset(generate_dataset(config.synth, num_eval, prefix="eval", seed=seed + 1), out / "eval")
    return Result.ok({"train": str(out / "train"), "eval": str(out / "eval"),
                      "num_train": num_train, "num_eval": num_eval})


def cmd_train(args: argparse.Namespace) -> Result[Dict[str, Any]]:
    config = _config(args)
    stage = Stage(args.stage)
    if args.no_progress:
        config.run.show_progress = False
    data = load_dataset(args.dataset)
    eval_data = load_dataset(args.eval_dataset) if args.eval_dataset else None
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, run_dir / "config.yaml")

    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        if checkpoint.stage != stage.value:
            raise ConfigurationError(f"--resume 检查点属于 {checkpoint.stage} 阶段，与 --stage {stage.value} 不符")
        model = checkpoint.build_model()
        resume = restore_state(model, checkpoint, config)
        logger.info("从 %s 续训（epoch %d, step %d）", args.resume, resume.epoch, resume.step)
    else:
        model = LineTransformer(config.model, seed=config.optim.seed)
        resume = None

    if stage is Stage.COARSE:
        state = train_stage_coarse(model, data, config, run_dir, eval_data, resume)
    elif stage is Stage.FINE:
        coarse_state = None
        if resume is None:
            if not args.coarse_checkpoint:
                raise ConfigurationError("精阶段训练需要粗阶段检查点，请用 --coarse-checkpoint 指定")
            model, coarse_state = load_coarse_checkpoint(args.coarse_checkpoint, config)
        state = train_stage_fine(model, data, config, coarse_state, run_dir, eval_data, resume)
    else:
        state = train_joint(model, data, config, run_dir, eval_data, resume)
    return Result.ok({
        "stage": state.stage.value,
        "epochs": state.epoch,
        "steps": state.step,
        "best_score": state.best_score if state.best_epoch >= 0 else None,
        "checkpoint": str(run_dir / LAST_CHECKPOINT),
    })


def cmd_eval(args: argparse.Namespace) -> Result[Dict[str, Any]]:
    config = _config(args)
    dataset = load_dataset(args.dataset)
    if args.predictions:
        predictions = dict(read_segments_jsonl(args.predictions, scored=True))
        missing = [s.id for s in dataset if s.id not in predictions]
        if missing:
            raise InputError(f"预测文件缺少 {len(missing)} 张图像，例如 {missing[:3]}")
        preds = [predictions[s.id] for s in dataset]
        report, raw = evaluate_predictions(preds, [s.targets for s in dataset], config.metric)  # type: ignore[arg-type]
    elif args.checkpoint:
        checkpoint = load_checkpoint(args.checkpoint)
        model = checkpoint.build_model()
        per_layer = args.per_layer or config.run.per_layer_eval
        report, raw = evaluate(model, dataset, config.metric, per_layer=per_layer,
                               use_fine=checkpoint.stage != Stage.COARSE.value,
                               show_progress=not args.no_progress)
    else:
        raise ConfigurationError("eval 需要 --checkpoint 或 --predictions 之一")
    written = write_report(report, raw, args.out)
    return Result.ok(report.to_dict(), metadata={"files": [str(p) for p in written]})


def _read_image(path: str) -> np.ndarray:
    if not Path(path).exists():
        raise InputError(f"图像不存在: {path}")
    with Image.open(path) as pil:
        return np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0


def cmd_predict(args: argparse.Namespace) -> Result[Dict[str, Any]]:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build_model()
    image = _read_image(args.image)
    layers = predict_layers(model, image, use_fine=checkpoint.stage != Stage.COARSE.value)
    segments = inference_filter(layers[-1], args.threshold)
    record = {
        "id": Path(args.image).stem,
        "width": int(image.shape[1]),
        "height": int(image.shape[0]),
        "segments": [[s.x1, s.y1, s.x2, s.y2, s.score] for s in segments],
    }
    line = json.dumps(record) + "\n"
    metadata: Dict[str, Any] = {}
    if args.out:
        Path(args.out).write_text(line, encoding="utf-8")
        metadata["out"] = args.out
    else:
        sys.stdout.write(line)
        metadata["stdout"] = True
    if args.attention_out:
        np.savez(args.attention_out, **model.attention_maps())
        metadata["attention"] = args.attention_out
    return Result.ok({"count": len(segments)}, metadata=metadata)


def cmd_curves(args: argparse.Namespace) -> Result[Dict[str, Any]]:
    raw_path = Path(args.raw)
    if not raw_path.exists():
        raise InputError(f"原始匹配数据不存在: {raw_path}")
    raw = RawMatchData.load(raw_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written: List[str] = []
    for name, curve in raw.curves(args.sweep_resolution).items():
        path = out / f"pr_{name}.csv"
        export_pr_curve(curve, path)
        written.append(str(path))
    return Result.ok({"files": written})


def cmd_bench(args: argparse.Namespace) -> Result[Dict[str, Any]]:
    config = _config(args)
    overrides = {name: getattr(args, name) for name in
                 ("num_train", "num_eval", "extent", "coarse_epochs", "fine_epochs", "seed")
                 if getattr(args, name) is not None}
    bench = BenchmarkConfig(model=config.model, joint=not args.no_joint, **overrides)
    report = run_benchmark(bench, args.out)
    summary = report.to_dict(bench)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.json").write_text(json.dumps(summary, indent=2, ensure_ascii=False), encoding="utf-8")
    if not summary["passed"]:
        logger.warning("基准未全部达标: %s", {k: v for k, v in summary["checks"].items() if not v})
    return Result.ok(summary, metadata={"files": [str(out / "benchmark.json")]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lineTransformer", description="粗到精 Transformer 线段检测")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="生成合成数据集")
    synth.add_argument("--config")
    synth.add_argument("--out", required=True)
    synth.add_argument("--num-train", type=int)
    synth.add_argument("--num-eval", type=int)
    synth.set_defaults(handler=cmd_synth)

    train = sub.add_parser("train", help="训练")
    train.add_argument("--stage", choices=[s.value for s in Stage], default=Stage.COARSE.value)
    train.add_argument("--config")
    train.add_argument("--dataset", required=True)
    train.add_argument("--eval-dataset")
    train.add_argument("--run-dir", required=True)
    train.add_argument("--resume")
    train.add_argument("--coarse-checkpoint")
    train.add_argument("--no-progress", action="store_true")
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser("eval", help="评测")
    evaluate_cmd.add_argument("--checkpoint")
    evaluate_cmd.add_argument("--predictions")
    evaluate_cmd.add_argument("--dataset", required=True)
    evaluate_cmd.add_argument("--out", required=True)
    evaluate_cmd.add_argument("--config")
    evaluate_cmd.add_argument("--per-layer", action="store_true")
    evaluate_cmd.add_argument("--no-progress", action="store_true")
    evaluate_cmd.set_defaults(handler=cmd_eval)

    predict = sub.add_parser("predict", help="单图推理")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--image", required=True)
    predict.add_argument("--threshold", type=float, default=0.5)
    predict.add_argument("--out")
    predict.add_argument("--attention-out")
    predict.set_defaults(handler=cmd_predict)

    curves = sub.add_parser("curves", help="由原始匹配数据导出 PR 曲线")
    curves.add_argument("--raw", required=True)
    curves.add_argument("--out", required=True)
    curves.add_argument("--sweep-resolution", type=int)
    curves.set_defaults(handler=cmd_curves)

    bench = sub.add_parser("bench", help="桌面规模基准")
    bench.add_argument("--config")
    bench.add_argument("--out", required=True)
    bench.add_argument("--num-train", type=int)
    bench.add_argument("--num-eval", type=int)
    bench.add_argument("--extent", type=int)
    bench.add_argument("--coarse-epochs", type=int)
    bench.add_argument("--fine-epochs", type=int)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--no-joint", action="store_true")
    bench.set_defaults(handler=cmd_bench)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> Result[Any]:
    """解析参数并执行子命令；用法错误转为 INVALID_PARAMETER 结果"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            return Result.ok(None)
        return Result.error(ErrorCode.INVALID_PARAMETER, "命令行参数错误")
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler: Handler = args.handler
    try:
        return handler(args)
    except LineTransformerException as e:
        logger.error("%s 失败: %s", args.command, e.message)
        return Result.from_exception(e)
    except OSError as e:
        logger.error("%s 读写失败: %s", args.command, e)
        return Result.error(ErrorCode.IO_FAILED, str(e))


def main(argv: Optional[Sequence[str]] = None) -> int:
    result = run(argv)
    if not result.success:
        sys.stderr.write(json.dumps(result.to_dict(), ensure_ascii=False) + "\n")
    elif result.data is not None and not result.metadata.get("stdout"):
        sys.stdout.write(json.dumps(result.data, ensure_ascii=False) + "\n")
    return result.to_exit_code()


if __name__ == "__main__":
    sys.exit(main())
