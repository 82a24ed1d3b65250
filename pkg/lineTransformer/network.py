"""线段检测 Transformer 网络

小型卷积骨干网给出 1/16（C4 对应）和 1/32（C5 对应）两层特征，各自 1×1 卷积投影到
d_model；粗阶段编码/解码器处理低分辨率特征，精阶段继承粗阶段的线实体并处理高分辨率
特征；两个预测头在所有解码层之间共享，每层输出都保留下来做深监督。
"""

import logging
from dataclasses import asdict, dataclass, field
from itertools import chain
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import Tensor, conv2d, parameter, relu, sigmoid
from .blocks import DecoderLayer, EncoderLayer, Linear, Module, positional_encoding
from .exceptions import DimensionError, InputError, ParameterError
from .models import ScoredSegment

logger = logging.getLogger(__name__)

# 两个特征层的下采样倍数
FINE_STRIDE = 16
COARSE_STRIDE = 32


@dataclass
class ModelConfig:
    """模型配置，默认值是单机可训练的规模

    Attributes:
        d_model: Transformer 通道数
        num_heads: 注意力头数
        coarse_encoder_layers / coarse_decoder_layers: 粗阶段层数
        fine_encoder_layers / fine_decoder_layers: 精阶段层数
        num_entities: 线实体数 N
        ff_dim: FC 块隐层宽度
        dropout: Transformer 内的 dropout 比例
        stem_channels: 骨干网首层通道数
        backbone_channels: 四个下采样块的通道数（投影前的通道规划）
        input_channels: 输入图像通道数
        temperature: 正弦位置编码温度
        coarse_feature_level: 粗编码器读取哪一层特征（"c5" 或 "c4"）
        fine_encoder_init: 精阶段开始时精编码器的初始化方式（"fresh" 或 "coarse"）
    """
    d_model: int = 64
    num_heads: int = 4
    coarse_encoder_layers: int = 2
    coarse_decoder_layers: int = 2
    fine_encoder_layers: int = 2
    fine_decoder_layers: int = 2
    num_entities: int = 50
    ff_dim: int = 128
    dropout: float = 0.1
    stem_channels: int = 8
    backbone_channels: Tuple[int, ...] = (16, 32, 64, 128)
    input_channels: int = 3
    temperature: float = 10000.0
    coarse_feature_level: str = "c5"
    fine_encoder_init: str = "fresh"

    def __post_init__(self) -> None:
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if self.num_heads < 1 or self.d_model % self.num_heads != 0:
            raise ParameterError(f"d_model={self.d_model} 须能被 num_heads={self.num_heads} 整除")
        if self.d_model % 4 != 0:
            raise ParameterError(f"d_model={self.d_model} 须能被 4 整除（二维正弦位置编码）")
        if self.num_entities < 1:
            raise ParameterError(f"num_entities 须 ≥1，当前 {self.num_entities}")
        if len(self.backbone_channels) != 4:
            raise ParameterError(f"backbone_channels 须给出 4 个块的通道数，当前 {self.backbone_channels}")
        if min(self.coarse_encoder_layers, self.coarse_decoder_layers,
               self.fine_encoder_layers, self.fine_decoder_layers) < 1:
            raise ParameterError("每个编码/解码堆叠至少 1 层")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout 须在 [0,1)，当前 {self.dropout}")
        if self.coarse_feature_level not in ("c5", "c4"):
            raise ParameterError(f"coarse_feature_level 只能是 c5 或 c4，当前 {self.coarse_feature_level}")
        if self.fine_encoder_init not in ("fresh", "coarse"):
            raise ParameterError(f"fine_encoder_init 只能是 fresh 或 coarse，当前 {self.fine_encoder_init}")

    @classmethod
    def full_scale(cls) -> 'ModelConfig':
        """完整规模：256 通道、8 头、6+6 层、1000 个线实体"""
        return cls(d_model=256, num_heads=8, coarse_encoder_layers=6, coarse_decoder_layers=6,
                   fine_encoder_layers=6, fine_decoder_layers=6, num_entities=1000, ff_dim=2048)

    @property
    def num_decoder_layers(self) -> int:
        return self.coarse_decoder_layers + self.fine_decoder_layers

    def to_dict(self) -> Dict[str, object]:
        record = asdict(self)
        record["backbone_channels"] = list(self.backbone_channels)
        return record


@dataclass
class BackboneOutput:
    """骨干网输出

    Attributes:
        coarse: 粗编码器输入，(H·W)×d_model
        fine: 精编码器输入，(H·W)×d_model
        coarse_hw / fine_hw: 两个特征网格的 (H, W)
        pre_projection_channels: 投影前两层特征的通道数 (coarse, fine)
    """
    coarse: Tensor
    fine: Tensor
    coarse_hw: Tuple[int, int]
    fine_hw: Tuple[int, int]
    pre_projection_channels: Tuple[int, int] = (0, 0)


@dataclass
class LayerPrediction:
    """一个解码层的 N 个预测

    Attributes:
        scores: 置信度 p，形状 (N,)
        endpoints: (x1, y1, x2, y2)，形状 (N, 4)，均在 [0,1]
        stage: 所属阶段 "coarse" 或 "fine"
    """
    scores: Tensor
    endpoints: Tensor
    stage: str = "coarse"

    def to_segments(self) -> List[ScoredSegment]:
        return [
            ScoredSegment(float(e[0]), float(e[1]), float(e[2]), float(e[3]), score=float(s))
            for s, e in zip(self.scores.data, self.endpoints.data)
        ]


@dataclass
class PredictionSet:
    """每个解码层一份预测（先粗后精）"""
    layers: List[LayerPrediction] = field(default_factory=list)

    @property
    def final(self) -> LayerPrediction:
        """推理使用最后一层的预测"""
        return self.layers[-1]

    def stage_layers(self, stage: str) -> List[LayerPrediction]:
        return [layer for layer in self.layers if layer.stage == stage]

    def __len__(self) -> int:
        return len(self.layers)


class ConvBlock(Module):
    """步长 2 的 3×3 卷积 + 步长 1 的 3×3 卷积，各接 ReLU"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.down = parameter(_he_kernel(rng, 3, in_channels, out_channels))
        self.down_bias = parameter(np.zeros(out_channels))
        self.refine = parameter(_he_kernel(rng, 3, out_channels, out_channels))
        self.refine_bias = parameter(np.zeros(out_channels))

    def __call__(self, x: Tensor) -> Tensor:
        x = relu(conv2d(x, self.down, stride=2, padding=1) + self.down_bias)
        return relu(conv2d(x, self.refine, stride=1, padding=1) + self.refine_bias)


def _he_kernel(rng: np.random.Generator, size: int, in_channels: int, out_channels: int) -> np.ndarray:
    std = np.sqrt(2.0 / (size * size * in_channels))
    return rng.normal(0.0, std, size=(size, size, in_channels, out_channels))


class Backbone(Module):
    """首层步长 2 卷积 + 4 个下采样块，在步长 16 和 32 处引出特征"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.stem = parameter(_he_kernel(rng, 3, config.input_channels, config.stem_channels))
        self.stem_bias = parameter(np.zeros(config.stem_channels))
        channels = (config.stem_channels,) + config.backbone_channels
        self.blocks = [ConvBlock(channels[k], channels[k + 1], rng) for k in range(4)]

    def __call__(self, image: Tensor) -> Tuple[Tensor, Tensor]:
        """返回 (C4 对应的步长 16 特征, C5 对应的步长 32 特征)"""
        x = relu(conv2d(image, self.stem, stride=2, padding=1) + self.stem_bias)
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps[2], taps[3]


class Projection(Module):
    """1×1 卷积把骨干特征压到 d_model"""

    def __init__(self, in_channels: int, d_model: int, rng: np.random.Generator):
        self.kernel = parameter(_he_kernel(rng, 1, in_channels, d_model) * np.sqrt(0.5))
        self.bias = parameter(np.zeros(d_model))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel) + self.bias


class EntityBank(Module):
    """N 个可学习线实体 l ∈ R^{N×d_model}，在解码器中充当查询位置编码"""

    def __init__(self, num_entities: int, d_model: int, rng: np.random.Generator):
        self.embeddings = parameter(rng.normal(0.0, 1.0, size=(num_entities, d_model)))


class PredictionHeads(Module):
    """共享预测头：线性分类器 + 3 层 MLP 端点回归，输出都经 logistic 压到 [0,1]"""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.classifier = Linear(d_model, 1, rng)
        self.regress1 = Linear(d_model, d_model, rng)
        self.regress2 = Linear(d_model, d_model, rng)
        self.regress3 = Linear(d_model, 4, rng)

    def __call__(self, state: Tensor, stage: str = "coarse") -> LayerPrediction:
        scores = sigmoid(self.classifier(state)).reshape(state.shape[0])
        hidden = relu(self.regress2(relu(self.regress1(state))))
        endpoints = sigmoid(self.regress3(hidden))
        return LayerPrediction(scores=scores, endpoints=endpoints, stage=stage)


class LineTransformer(Module):
    """完整的粗到精线段检测网络"""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self._config = config
        rng = np.random.Generator(np.random.Philox(seed))
        d = config.d_model
        self.backbone = Backbone(config, rng)
        c4_channels, c5_channels = config.backbone_channels[2], config.backbone_channels[3]
        coarse_in = c5_channels if config.coarse_feature_level == "c5" else c4_channels
        self.coarse_proj = Projection(coarse_in, d, rng)
        self.fine_proj = Projection(c4_channels, d, rng)
        self.coarse_encoder = [
            EncoderLayer(d, config.num_heads, config.ff_dim, config.dropout, rng)
            for _ in range(config.coarse_encoder_layers)
        ]
        self.coarse_decoder = [
            DecoderLayer(d, config.num_heads, config.ff_dim, config.dropout, rng)
            for _ in range(config.coarse_decoder_layers)
        ]
        self.fine_encoder = [
            EncoderLayer(d, config.num_heads, config.ff_dim, config.dropout, rng)
            for _ in range(config.fine_encoder_layers)
        ]
        self.fine_decoder = [
            DecoderLayer(d, config.num_heads, config.ff_dim, config.dropout, rng)
            for _ in range(config.fine_decoder_layers)
        ]
        self.entities = EntityBank(config.num_entities, d, rng)
        self.heads = PredictionHeads(d, rng)
        self._pos_cache: Dict[Tuple[int, int], Tensor] = {}

    @property
    def config(self) -> ModelConfig:
        return self._config

    # ---------- 参数分组 ----------

    def coarse_parameters(self) -> List[Tensor]:
        """骨干网、粗投影、粗编码/解码器与线实体"""
        params = self.backbone.parameters() + self.coarse_proj.parameters() + self.entities.parameters()
        for layer in chain(self.coarse_encoder, self.coarse_decoder):
            params += layer.parameters()
        return params

    def fine_parameters(self) -> List[Tensor]:
        params = self.fine_proj.parameters()
        for layer in chain(self.fine_encoder, self.fine_decoder):
            params += layer.parameters()
        return params

    def head_parameters(self) -> List[Tensor]:
        return self.heads.parameters()

    def freeze_coarse(self) -> None:
        for module in chain([self.backbone, self.coarse_proj, self.entities], self.coarse_encoder, self.coarse_decoder):
            module.freeze()

    def init_fine_from_coarse(self) -> None:
        """精解码器拷贝粗解码器权重；fine_encoder_init=coarse 时编码器同样拷贝

        层数不同时，精阶段第 k 层取粗阶段第 k mod L 层。
        """
        for k, layer in enumerate(self.fine_decoder):
            layer.load_state_dict(self.coarse_decoder[k % len(self.coarse_decoder)].state_dict())
        if self._config.fine_encoder_init == "coarse":
            for k, enc in enumerate(self.fine_encoder):
                enc.load_state_dict(self.coarse_encoder[k % len(self.coarse_encoder)].state_dict())
        logger.info("精阶段解码器已由粗阶段权重初始化（编码器: %s）", self._config.fine_encoder_init)

    # ---------- 前向 ----------

    def _positions(self, height: int, width: int) -> Tensor:
        key = (height, width)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_encoding(height, width, self._config.d_model, self._config.temperature)
        return self._pos_cache[key]

    def backbone_forward(self, image: np.ndarray) -> BackboneOutput:
        """骨干网前向

        Args:
            image: H0×W0×C 图像，H0、W0 须为 32 的倍数

        Raises:
            InputError: 尺寸不能被 32 整除
            DimensionError: 通道数与配置不符
        """
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != self._config.input_channels:
            raise DimensionError(f"输入图像须为 H×W×{self._config.input_channels}，当前 {image.shape}")
        height, width = image.shape[:2]
        if height % COARSE_STRIDE or width % COARSE_STRIDE or height == 0 or width == 0:
            raise InputError(f"图像尺寸 {height}×{width} 须为 {COARSE_STRIDE} 的正整数倍")
        c4, c5 = self.backbone(Tensor(image))
        coarse_map = c5 if self._config.coarse_feature_level == "c5" else c4
        coarse = self.coarse_proj(coarse_map)
        fine = self.fine_proj(c4)
        d = self._config.d_model
        return BackboneOutput(
            coarse=coarse.reshape(coarse.shape[0] * coarse.shape[1], d),
            fine=fine.reshape(fine.shape[0] * fine.shape[1], d),
            coarse_hw=(coarse.shape[0], coarse.shape[1]),
            fine_hw=(fine.shape[0], fine.shape[1]),
            pre_projection_channels=(coarse_map.shape[2], c4.shape[2]),
        )

    def _decode(
        self,
        encoders: Sequence[EncoderLayer],
        decoders: Sequence[DecoderLayer],
        features: Tensor,
        hw: Tuple[int, int],
        entities: Tensor,
        training: bool,
        rng: Optional[np.random.Generator],
    ) -> Tuple[Tensor, List[Tensor]]:
        pos = self._positions(*hw)
        encoded = features
        for encoder in encoders:
            encoded = encoder(encoded, pos, training, rng)
        query_pos = self.entities.embeddings
        states = []
        state = entities
        for decoder in decoders:
            state = decoder(state, encoded, query_pos, pos, training, rng)
            states.append(state)
        return encoded, states

    def coarse_stage(
        self,
        backbone_out: BackboneOutput,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[Tensor, List[Tensor]]:
        """粗编码器处理低分辨率特征，粗解码器逐层精炼线实体（初始状态为零）"""
        start = Tensor(np.zeros((self._config.num_entities, self._config.d_model)))
        return self._decode(self.coarse_encoder, self.coarse_decoder, backbone_out.coarse,
                            backbone_out.coarse_hw, start, training, rng)

    def fine_stage(
        self,
        backbone_out: BackboneOutput,
        coarse_entities: Tensor,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> List[Tensor]:
        """精解码器继承粗解码器最后一层的线实体，读取高分辨率特征"""
        _, states = self._decode(self.fine_encoder, self.fine_decoder, backbone_out.fine,
                                 backbone_out.fine_hw, coarse_entities, training, rng)
        return states

    def predict_heads(self, entity_states: Sequence[Tensor], stage: str = "coarse") -> PredictionSet:
        """共享预测头作用到每个解码层"""
        return PredictionSet([self.heads(state, stage) for state in entity_states])

    def full_forward(
        self,
        image: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> PredictionSet:
        """骨干 → 粗阶段 → 精阶段 → 共享预测头，返回全部解码层的预测"""
        features = self.backbone_forward(image)
        _, coarse_states = self.coarse_stage(features, training, rng)
        fine_states = self.fine_stage(features, coarse_states[-1], training, rng)
        predictions = self.predict_heads(coarse_states, "coarse")
        predictions.layers.extend(self.predict_heads(fine_states, "fine").layers)
        return predictions

    def coarse_forward(
        self,
        image: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> PredictionSet:
        """只跑粗阶段（粗阶段训练时使用，省掉精阶段的计算）"""
        features = self.backbone_forward(image)
        _, coarse_states = self.coarse_stage(features, training, rng)
        return self.predict_heads(coarse_states, "coarse")

    def attention_maps(self) -> Dict[str, np.ndarray]:
        """最近一次前向中两阶段最后一个解码层的交叉注意力权重（N×HW）"""
        maps = {}
        coarse = self.coarse_decoder[-1].cross_attn.last_weights
        fine = self.fine_decoder[-1].cross_attn.last_weights
        if coarse is not None:
            maps["coarse"] = coarse
        if fine is not None:
            maps["fine"] = fine
        return maps


def inference_filter(predictions: LayerPrediction, confidence_threshold: float) -> List[ScoredSegment]:
    """保留 p ≥ 阈值 的预测，不做任何非极大值抑制

    Raises:
        ParameterError: 阈值不在 [0,1]
    """
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ParameterError(f"置信度阈值须在 [0,1]，当前 {confidence_threshold}")
    return [seg for seg in predictions.to_segments() if seg.score >= confidence_threshold]
