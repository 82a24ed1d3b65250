"""两阶段训练与评测

粗阶段：训练骨干网、粗编码/解码器和预测头，只用粗解码层的损失。
精阶段：冻结粗阶段全部参数，精解码器由粗解码器权重初始化，只用精解码层的损失；
最后 focal_epochs 轮把分类损失切换到 γ>0。
联合阶段（对照实验）：所有层一起训练。
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .autograd import Tensor
from .checkpoint import Checkpoint, load_checkpoint, rng_from_json, rng_state_to_json, save_checkpoint
from .config import OptimConfig, RunConfig
from .exceptions import ConfigurationError, InputError, TrainingDivergedError
from .losses import FocalParams, LossBreakdown, total_loss
from .matching import segments_to_array
from .metrics import MetricConfig, RawMatchData, evaluate_predictions, export_pr_curve, structural_ap
from .models import EvalReport, Sample, ScoredSegment, Stage
from .network import LayerPrediction, LineTransformer
from .synth import augment, make_rng

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOG_FILE = "train_log.jsonl"
LAST_CHECKPOINT = "last.npz"
BEST_CHECKPOINT = "best.npz"


class AdamW:
    """Adam + 解耦权重衰减

    参数按名字保存一阶、二阶矩，检查点可以逐位恢复。
    """

    def __init__(self, params: Dict[str, Tensor], config: OptimConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.exp_avg_sq = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        cfg = self.config
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            p.data = p.data * (1.0 - lr * cfg.weight_decay)
            m = self.exp_avg[name] = cfg.beta1 * self.exp_avg[name] + (1.0 - cfg.beta1) * p.grad
            v = self.exp_avg_sq[name] = cfg.beta2 * self.exp_avg_sq[name] + (1.0 - cfg.beta2) * p.grad ** 2
            p.data = p.data - lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"step": np.array(self.step_count)}
        for name in self.params:
            state[f"m/{name}"] = self.exp_avg[name]
            state[f"v/{name}"] = self.exp_avg_sq[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            self.exp_avg[name] = np.array(state[f"m/{name}"], dtype=np.float64)
            self.exp_avg_sq[name] = np.array(state[f"v/{name}"], dtype=np.float64)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """按全局 L2 范数等比缩小梯度，返回裁剪前的范数；max_norm=0 时只计算不裁剪"""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_at_epoch(config: OptimConfig, epoch: int, interval: int) -> float:
    """阶梯衰减：每 interval 轮学习率除以 decay_factor"""
    return config.lr / config.decay_factor ** (epoch // interval)


@dataclass
class TrainState:
    """训练状态

    Attributes:
        stage: 当前阶段
        epoch: 已完成的轮数
        step: 已完成的优化步数
        optimizer: 优化器（含矩估计）
        rng: 训练随机流
        best_score: 迄今最好的评测 sAP
        best_epoch: 取得 best_score 的轮数
        epochs_since_best: 距上次提升的轮数
        loss_history: 每步的训练损失
    """
    stage: Stage
    optimizer: AdamW
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    best_score: float = -1.0
    best_epoch: int = -1
    epochs_since_best: int = 0
    loss_history: List[float] = field(default_factory=list)

    def meta(self) -> Dict[str, Any]:
        return {
            "stage": self.stage.value,
            "epoch": self.epoch,
            "step": self.step,
            "best_score": self.best_score,
            "best_epoch": self.best_epoch,
            "epochs_since_best": self.epochs_since_best,
            "rng_state": rng_state_to_json(self.rng),
        }


def trainable_parameters(model: LineTransformer, stage: Stage) -> Dict[str, Tensor]:
    """各阶段参与优化的参数（按名字）"""
    named = dict(model.named_parameters())
    if stage is Stage.JOINT:
        return named
    group = model.coarse_parameters() if stage is Stage.COARSE else model.fine_parameters()
    chosen = {id(p) for p in group + model.head_parameters()}
    return {name: p for name, p in named.items() if id(p) in chosen}


def new_state(model: LineTransformer, stage: Stage, config: RunConfig) -> TrainState:
    optimizer = AdamW(trainable_parameters(model, stage), config.optim)
    return TrainState(stage=stage, optimizer=optimizer, rng=make_rng(config.optim.seed))


def restore_state(model: LineTransformer, checkpoint: Checkpoint, config: RunConfig) -> TrainState:
    """从检查点恢复训练状态；模型参数须已载入"""
    stage = Stage(checkpoint.stage)
    if stage is Stage.FINE:
        model.freeze_coarse()
    optimizer = AdamW(trainable_parameters(model, stage), config.optim)
    optimizer.load_state_dict(checkpoint.optimizer)
    meta = checkpoint.meta
    return TrainState(
        stage=stage,
        optimizer=optimizer,
        rng=rng_from_json(meta["rng_state"]),
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        best_score=float(meta["best_score"]),
        best_epoch=int(meta["best_epoch"]),
        epochs_since_best=int(meta["epochs_since_best"]),
    )


def stage_predictions(model: LineTransformer, stage: Stage, image: np.ndarray,
                      training: bool, rng: Optional[np.random.Generator]) -> List[LayerPrediction]:
    """阶段对应的受监督解码层输出"""
    if stage is Stage.COARSE:
        return model.coarse_forward(image, training, rng).layers
    predictions = model.full_forward(image, training, rng)
    return predictions.layers if stage is Stage.JOINT else predictions.stage_layers("fine")


def _stage_setup(stage: Stage, config: RunConfig) -> Tuple[int, int]:
    optim = config.optim
    if stage is Stage.COARSE:
        return optim.coarse_epochs, optim.coarse_decay_interval
    if stage is Stage.FINE:
        return optim.fine_epochs, optim.fine_decay_interval
    return optim.joint_epochs, optim.coarse_decay_interval


def _focal_for(stage: Stage, epoch: int, total_epochs: int, config: RunConfig) -> FocalParams:
    if stage is Stage.COARSE:
        return config.loss.main_focal()
    return config.loss.focal_for_epoch(epoch, total_epochs)


class Trainer:
    """单阶段训练循环

    每轮：按 rng 打乱 → 逐批增强、前向、计算深监督损失、反向 → 梯度裁剪 → AdamW。
    轮末写日志行、保存 last.npz，按间隔评测并维护 best.npz 与早停计数。
    """

    def __init__(
        self,
        model: LineTransformer,
        config: RunConfig,
        state: TrainState,
        run_dir: Optional[PathLike] = None,
        eval_data: Optional[Sequence[Sample]] = None,
    ):
        self.model = model
        self.config = config
        self.state = state
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.eval_data = list(eval_data) if eval_data else []
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

    def _train_step(self, batch: Sequence[Sample], focal: FocalParams, lr: float) -> Tuple[float, LossBreakdown]:
        state = self.state
        state.optimizer.zero_grad()
        loss_sum = 0.0
        merged = LossBreakdown(gamma=focal.gamma)
        for sample in batch:
            sample = augment(sample, self.config.synth, state.rng)
            layers = stage_predictions(self.model, state.stage, sample.image, True, state.rng)
            loss, breakdown = total_loss(layers, segments_to_array(sample.targets), self.config.loss, focal)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"第 {state.step} 步出现非有限损失 {value}（样本 {sample.id}）",
                    step=state.step,
                    layer_losses=breakdown.layers,
                )
            (loss * (1.0 / len(batch))).backward()
            loss_sum += value
            merged.layers.extend(breakdown.layers)
        clip_grad_norm(list(state.optimizer.params.values()), self.config.optim.clip_norm)
        state.optimizer.step(lr)
        state.step += 1
        mean_loss = loss_sum / len(batch)
        state.loss_history.append(mean_loss)
        return mean_loss, merged

    def train_epoch(self, data: Sequence[Sample], total_epochs: int, interval: int) -> Dict[str, Any]:
        state = self.state
        lr = lr_at_epoch(self.config.optim, state.epoch, interval)
        focal = _focal_for(state.stage, state.epoch, total_epochs, self.config)
        order = state.rng.permutation(len(data))
        batch_size = self.config.optim.batch_size
        batches = [[data[i] for i in order[k:k + batch_size]] for k in range(0, len(order), batch_size)]
        losses, cls_terms, dist_terms = [], [], []
        progress = tqdm(batches, desc=f"{state.stage.value} {state.epoch}",
                        disable=not self.config.run.show_progress, leave=False)
        for batch in progress:
            loss, breakdown = self._train_step(batch, focal, lr)
            losses.append(loss)
            cls_terms.append(breakdown.classification / len(batch))
            dist_terms.append(breakdown.distance / len(batch))
            progress.set_postfix(loss=f"{loss:.4f}")
        return {
            "epoch": state.epoch,
            "stage": state.stage.value,
            "step": state.step,
            "loss": float(np.mean(losses)) if losses else None,
            "loss_cls": float(np.mean(cls_terms)) if cls_terms else None,
            "loss_dist": float(np.mean(dist_terms)) if dist_terms else None,
            "gamma": focal.gamma,
            "lr": lr,
        }

    def _maybe_evaluate(self) -> Optional[Dict[str, Any]]:
        interval = self.config.run.eval_interval
        if not self.eval_data or interval == 0 or self.state.epoch % interval:
            return None
        use_fine = self.state.stage is not Stage.COARSE
        report, _ = evaluate(self.model, self.eval_data, self.config.metric,
                             per_layer=self.config.run.per_layer_eval, use_fine=use_fine)
        return report.to_dict()

    def _checkpoint(self, name: str) -> None:
        if self.run_dir is not None:
            save_checkpoint(self.run_dir / name, self.model, self.state.optimizer.state_dict(), self.state.meta())

    def _log(self, record: Dict[str, Any]) -> None:
        if self.run_dir is not None:
            with open(self.run_dir / LOG_FILE, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")

    def fit(self, data: Sequence[Sample]) -> TrainState:
        """训练到本阶段的总轮数或触发早停"""
        if not data:
            raise InputError("训练集为空")
        state = self.state
        total_epochs, interval = _stage_setup(state.stage, self.config)
        patience = self.config.optim.patience
        while state.epoch < total_epochs:
            record = self.train_epoch(data, total_epochs, interval)
            state.epoch += 1
            evaluation = self._maybe_evaluate()
            record["eval"] = evaluation
            improved = False
            if evaluation is not None:
                score = float(evaluation[f"sAP{self.config.metric.thresholds[0]:g}"])
                improved = score > state.best_score
                if improved:
                    state.best_score, state.best_epoch, state.epochs_since_best = score, state.epoch, 0
                else:
                    state.epochs_since_best += 1
            self._log(record)
            self._checkpoint(LAST_CHECKPOINT)
            if improved:
                self._checkpoint(BEST_CHECKPOINT)
            logger.info("[%s] epoch %d/%d loss=%s lr=%.2e eval=%s", state.stage.value, state.epoch,
                        total_epochs, record["loss"], record["lr"], evaluation)
            if patience and state.epochs_since_best >= patience:
                logger.info("评测 sAP 已连续 %d 轮未提升，提前停止（最好 %.4f @ epoch %d）",
                            patience, state.best_score, state.best_epoch)
                break
        return state


def train_stage_coarse(
    model: LineTransformer,
    data: Sequence[Sample],
    config: RunConfig,
    run_dir: Optional[PathLike] = None,
    eval_data: Optional[Sequence[Sample]] = None,
    resume: Optional[TrainState] = None,
) -> TrainState:
    """粗阶段训练；resume 给出时从该状态继续"""
    state = resume or new_state(model, Stage.COARSE, config)
    return Trainer(model, config, state, run_dir, eval_data).fit(data)


def train_stage_fine(
    model: LineTransformer,
    data: Sequence[Sample],
    config: RunConfig,
    coarse_state: Optional[TrainState] = None,
    run_dir: Optional[PathLike] = None,
    eval_data: Optional[Sequence[Sample]] = None,
    resume: Optional[TrainState] = None,
) -> TrainState:
    """精阶段训练

    非续训时要求已完成的粗阶段状态：冻结粗阶段参数，精解码器拷贝粗解码器权重。

    Raises:
        ConfigurationError: 缺少粗阶段状态
    """
    if resume is None:
        if coarse_state is None or coarse_state.stage is not Stage.COARSE:
            raise ConfigurationError("精阶段训练需要粗阶段检查点（coarse checkpoint）")
        model.freeze_coarse()
        model.init_fine_from_coarse()
        state = new_state(model, Stage.FINE, config)
    else:
        model.freeze_coarse()
        state = resume
    return Trainer(model, config, state, run_dir, eval_data).fit(data)


def train_joint(
    model: LineTransformer,
    data: Sequence[Sample],
    config: RunConfig,
    run_dir: Optional[PathLike] = None,
    eval_data: Optional[Sequence[Sample]] = None,
    resume: Optional[TrainState] = None,
) -> TrainState:
    """单阶段联合训练，全部解码层一起监督"""
    state = resume or new_state(model, Stage.JOINT, config)
    return Trainer(model, config, state, run_dir, eval_data).fit(data)


def load_coarse_checkpoint(path: PathLike, config: RunConfig) -> Tuple[LineTransformer, TrainState]:
    """读取粗阶段检查点作为精阶段的前置条件，按检查点里的模型配置重建模型

    Raises:
        ConfigurationError: 文件不存在或不是粗阶段检查点
    """
    try:
        checkpoint = load_checkpoint(path)
    except InputError as e:
        raise ConfigurationError(f"精阶段训练需要粗阶段检查点: {e.message}") from e
    if checkpoint.stage != Stage.COARSE.value:
        raise ConfigurationError(f"{path} 是 {checkpoint.stage or '未知'} 阶段的检查点，精阶段需要粗阶段检查点")
    model = checkpoint.build_model()
    return model, restore_state(model, checkpoint, config)


# ==================== 评测 ====================

def predict_layers(model: LineTransformer, image: np.ndarray, use_fine: bool = True) -> List[LayerPrediction]:
    """推理模式前向（不开 dropout）"""
    if use_fine:
        return model.full_forward(image).layers
    return model.coarse_forward(image).layers


def evaluate(
    model: LineTransformer,
    dataset: Sequence[Sample],
    metric_config: Optional[MetricConfig] = None,
    per_layer: bool = False,
    use_fine: bool = True,
    show_progress: bool = False,
) -> Tuple[EvalReport, RawMatchData]:
    """在数据集上评测最后一个解码层，可选逐层 sAP

    Raises:
        InputError: 数据集为空
    """
    if not dataset:
        raise InputError("评测数据集为空")
    metric_config = metric_config or MetricConfig()
    final_preds: List[List[ScoredSegment]] = []
    layer_preds: List[List[List[ScoredSegment]]] = []
    for sample in tqdm(dataset, desc="eval", disable=not show_progress, leave=False):
        layers = predict_layers(model, sample.image, use_fine)
        final_preds.append(layers[-1].to_segments())
        if per_layer:
            layer_preds.append([layer.to_segments() for layer in layers])
    gts = [sample.targets for sample in dataset]
    report, raw = evaluate_predictions(final_preds, gts, metric_config)
    if per_layer:
        threshold = metric_config.thresholds[0]
        report.per_layer_sap = [
            structural_ap([preds[k] for preds in layer_preds], gts, threshold, metric_config.structural_extent)
            for k in range(len(layer_preds[0]))
        ]
    return report, raw


def write_report(report: EvalReport, raw: RawMatchData, out_dir: PathLike) -> List[Path]:
    """写 report.json、每条曲线一个 pr_*.csv，以及 raw_matches.npz"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "report.json"]
    written[0].write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
    for name, curve in report.curves.items():
        path = out / f"pr_{name}.csv"
        export_pr_curve(curve, path)
        written.append(path)
    raw.save(out / "raw_matches.npz")
    written.append(out / "raw_matches.npz")
    return written
