"""合成线段场景与数据集读写

场景是噪声背景上的若干条抗锯齿直线，真值记录精确端点。
端点坐标取在 2^-20 网格上，翻转 x→1−x 因而是精确的对合；
图像量化到 1/255，旁路 PPM 文件可以无损保存。
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .exceptions import DatasetParseError, InputError, ParameterError
from .metrics import segment_pixels
from .models import LineSegment, Sample

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ANNOTATION_FILE = "annotations.jsonl"
IMAGE_DIR = "images"
COORD_GRID = 2 ** 20


@dataclass
class SynthConfig:
    """合成数据配置

    Attributes:
        extent: 图像边长（须为 32 的倍数）
        min_segments / max_segments: 每张图的线段数范围
        min_length: 线段最短长度（归一化坐标）
        thickness: 线宽（像素）
        noise: 背景高斯噪声标准差，0 表示纯色背景
        background: 背景灰度
        seed: 数据集随机种子
        hflip / vflip / resize / crop: 增强开关
        train_extents: 多分辨率训练时 resize 的候选边长，空表示不变
        crop_min_scale: 随机裁剪窗口相对原图的最小边长比例
        crop_retries: 裁剪后没有线段存活时的重采样次数
    """
    extent: int = 64
    min_segments: int = 1
    max_segments: int = 4
    min_length: float = 0.2
    thickness: float = 1.0
    noise: float = 0.02
    background: float = 0.1
    seed: int = 0
    hflip: bool = True
    vflip: bool = True
    resize: bool = False
    crop: bool = False
    train_extents: Tuple[int, ...] = ()
    crop_min_scale: float = 0.5
    crop_retries: int = 10

    def __post_init__(self) -> None:
        self.train_extents = tuple(int(e) for e in self.train_extents)
        for extent in (self.extent,) + self.train_extents:
            if extent <= 0 or extent % 32 != 0:
                raise ParameterError(f"图像边长须为 32 的正整数倍，当前 {extent}")
        if not 1 <= self.min_segments <= self.max_segments:
            raise ParameterError(f"线段数范围无效: [{self.min_segments}, {self.max_segments}]")
        if not 0.0 < self.min_length <= 1.0:
            raise ParameterError(f"min_length 须在 (0,1]，当前 {self.min_length}")
        if self.thickness <= 0 or self.noise < 0:
            raise ParameterError("线宽须为正，噪声须非负")
        if not 0.0 <= self.background < 1.0:
            raise ParameterError(f"背景灰度须在 [0,1)，当前 {self.background}")
        if not 0.0 < self.crop_min_scale <= 1.0:
            raise ParameterError(f"crop_min_scale 须在 (0,1]，当前 {self.crop_min_scale}")
        if self.crop_retries < 0:
            raise ParameterError(f"crop_retries 须非负，当前 {self.crop_retries}")


def make_rng(seed: Union[int, np.random.SeedSequence]) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def quantize_coord(value: float) -> float:
    return float(np.clip(np.round(value * COORD_GRID) / COORD_GRID, 0.0, 1.0))


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# ==================== 渲染 ====================

def _random_segment(cfg: SynthConfig, rng: np.random.Generator) -> LineSegment:
    while True:
        segment = LineSegment(*(quantize_coord(v) for v in rng.uniform(0.0, 1.0, size=4)))
        if segment.length() >= cfg.min_length:
            return segment


def _stroke_alpha(segment: LineSegment, height: int, width: int, thickness: float) -> np.ndarray:
    """抗锯齿笔画覆盖度：像素中心到线段的距离场，叠加 Bresenham 主干像素"""
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    px, py = cols + 0.5, rows + 0.5
    ax, ay = segment.x1 * width, segment.y1 * height
    bx, by = segment.x2 * width, segment.y2 * height
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / denom, 0.0, 1.0) if denom > 0 else np.zeros_like(px)
    dist = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
    alpha = np.clip(thickness / 2.0 + 0.5 - dist, 0.0, 1.0)
    if height == width:
        for row, col in segment_pixels(segment, width):
            alpha[row, col] = 1.0
    return alpha


def render(segments: Sequence[LineSegment], cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """在背景上绘制线段，返回量化后的 H×W×3 图像"""
    extent = cfg.extent
    alpha = np.zeros((extent, extent))
    for segment in segments:
        alpha = np.maximum(alpha, _stroke_alpha(segment, extent, extent, cfg.thickness))
    gray = cfg.background * (1.0 - alpha) + alpha
    if cfg.noise > 0:
        gray = gray + rng.normal(0.0, cfg.noise, size=gray.shape)
    return quantize_image(np.repeat(gray[:, :, None], 3, axis=2))


def generate_scene(cfg: SynthConfig, rng: np.random.Generator, sample_id: str = "scene") -> Sample:
    """随机生成一张场景：k 条线段，k 在配置范围内均匀选取"""
    count = int(rng.integers(cfg.min_segments, cfg.max_segments + 1))
    targets = [_random_segment(cfg, rng) for _ in range(count)]
    return Sample(image=render(targets, cfg, rng), targets=targets, id=sample_id)


def generate_dataset(cfg: SynthConfig, count: int, prefix: str = "scene", seed: Optional[int] = None) -> List[Sample]:
    """按种子派生的独立子流逐张生成，结果与生成顺序无关"""
    streams = np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(count)
    return [generate_scene(cfg, make_rng(stream), f"{prefix}{k:05d}") for k, stream in enumerate(streams)]


# ==================== 增强 ====================

def hflip(sample: Sample) -> Sample:
    targets = [LineSegment(1.0 - s.x1, s.y1, 1.0 - s.x2, s.y2) for s in sample.targets]
    return replace(sample, image=sample.image[:, ::-1].copy(), targets=targets)


def vflip(sample: Sample) -> Sample:
    targets = [LineSegment(s.x1, 1.0 - s.y1, s.x2, 1.0 - s.y2) for s in sample.targets]
    return replace(sample, image=sample.image[::-1].copy(), targets=targets)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """双线性缩放，结果重新量化到 1/255"""
    if image.shape[:2] == (height, width):
        return image.copy()
    pil = Image.fromarray(np.round(image * 255.0).astype(np.uint8))
    resized = pil.resize((width, height), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def resize(sample: Sample, height: int, width: int) -> Sample:
    """改变像素尺寸，归一化坐标不变"""
    return replace(sample, image=resize_image(sample.image, height, width))


def clip_segment(segment: LineSegment, window: Tuple[float, float, float, float]) -> Optional[LineSegment]:
    """Liang–Barsky 裁剪到窗口 (x0, y0, x1, y1)，返回窗口内归一化坐标；完全在外返回 None"""
    x0, y0, x1, y1 = window
    dx, dy = segment.x2 - segment.x1, segment.y2 - segment.y1
    t_enter, t_exit = 0.0, 1.0
    for p, q in ((-dx, segment.x1 - x0), (dx, x1 - segment.x1), (-dy, segment.y1 - y0), (dy, y1 - segment.y1)):
        if p == 0:
            if q < 0:
                return None
            continue
        t = q / p
        if p < 0:
            t_enter = max(t_enter, t)
        else:
            t_exit = min(t_exit, t)
        if t_enter > t_exit:
            return None
    w, h = x1 - x0, y1 - y0
    clipped = LineSegment(
        quantize_coord((segment.x1 + t_enter * dx - x0) / w),
        quantize_coord((segment.y1 + t_enter * dy - y0) / h),
        quantize_coord((segment.x1 + t_exit * dx - x0) / w),
        quantize_coord((segment.y1 + t_exit * dy - y0) / h),
    )
    return clipped if clipped.length() > 0 else None


def crop(sample: Sample, box: Tuple[int, int, int, int]) -> Sample:
    """按像素框 (left, top, right, bottom) 裁剪并缩放回原尺寸

    线段裁剪到框内并重新归一化，完全落在框外的线段被丢弃。
    """
    left, top, right, bottom = box
    if not (0 <= left < right <= sample.width and 0 <= top < bottom <= sample.height):
        raise ParameterError(f"裁剪框 {box} 超出图像 {sample.width}×{sample.height}")
    window = (left / sample.width, top / sample.height, right / sample.width, bottom / sample.height)
    targets = [c for c in (clip_segment(s, window) for s in sample.targets) if c is not None]
    image = resize_image(sample.image[top:bottom, left:right], sample.height, sample.width)
    return replace(sample, image=image, targets=targets)


def _random_crop(sample: Sample, cfg: SynthConfig, rng: np.random.Generator) -> Sample:
    for _ in range(cfg.crop_retries + 1):
        crop_w = int(rng.integers(math.ceil(cfg.crop_min_scale * sample.width), sample.width + 1))
        crop_h = int(rng.integers(math.ceil(cfg.crop_min_scale * sample.height), sample.height + 1))
        left = int(rng.integers(0, sample.width - crop_w + 1))
        top = int(rng.integers(0, sample.height - crop_h + 1))
        cropped = crop(sample, (left, top, left + crop_w, top + crop_h))
        if cropped.targets:
            return cropped
    logger.debug("样本 %s 裁剪 %d 次均无线段存活，保持原样", sample.id, cfg.crop_retries + 1)
    return sample


def augment(sample: Sample, cfg: SynthConfig, rng: np.random.Generator) -> Sample:
    """按配置开关依次做随机裁剪、缩放、水平翻转、垂直翻转"""
    if cfg.crop:
        sample = _random_crop(sample, cfg, rng)
    if cfg.resize and cfg.train_extents:
        extent = cfg.train_extents[int(rng.integers(len(cfg.train_extents)))]
        sample = resize(sample, extent, extent)
    if cfg.hflip and rng.random() < 0.5:
        sample = hflip(sample)
    if cfg.vflip and rng.random() < 0.5:
        sample = vflip(sample)
    return sample


# ==================== 数据集读写 ====================

def save_dataset(samples: Sequence[Sample], path: PathLike) -> None:
    """写入目录：annotations.jsonl 加 images/<id>.ppm"""
    root = Path(path)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    with open(root / ANNOTATION_FILE, "w", encoding="utf-8") as f:
        for sample in samples:
            record = {
                "id": sample.id,
                "width": sample.width,
                "height": sample.height,
                "segments": [[s.x1, s.y1, s.x2, s.y2] for s in sample.targets],
            }
            f.write(json.dumps(record) + "\n")
            pixels = np.round(sample.image * 255.0).astype(np.uint8)
            Image.fromarray(pixels).save(root / IMAGE_DIR / f"{sample.id}.ppm")
    logger.info("已写入 %d 个样本到 %s", len(samples), root)


def _parse_record(line: str, line_number: int) -> Tuple[str, int, int, List[LineSegment]]:
    try:
        record = json.loads(line)
        segments = []
        for row in record["segments"]:
            if len(row) != 4:
                raise DatasetParseError(f"线段应有 4 个坐标，实际 {len(row)}", line_number)
            segments.append(LineSegment.from_sequence(row))
        return str(record["id"]), int(record["width"]), int(record["height"]), segments
    except DatasetParseError:
        raise
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetParseError(f"标注无法解析: {e}", line_number) from e


def load_dataset(path: PathLike) -> List[Sample]:
    """读取 save_dataset 写出的目录；也接受直接给出 annotations.jsonl 的路径

    Raises:
        InputError: 路径不存在
        DatasetParseError: 标注格式错误或图像缺失，带行号
    """
    root = Path(path)
    annotation = root if root.is_file() else root / ANNOTATION_FILE
    if not annotation.exists():
        raise InputError(f"数据集不存在: {annotation}")
    samples = []
    with open(annotation, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            sample_id, width, height, segments = _parse_record(line, line_number)
            image_path = annotation.parent / IMAGE_DIR / f"{sample_id}.ppm"
            if not image_path.exists():
                raise DatasetParseError(f"图像文件缺失: {image_path}", line_number)
            with Image.open(image_path) as pil:
                image = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
            if image.shape[:2] != (height, width):
                raise DatasetParseError(f"图像尺寸 {image.shape[:2]} 与标注 {height}×{width} 不符", line_number)
            samples.append(Sample(image=image, targets=segments, id=sample_id))
    return samples
