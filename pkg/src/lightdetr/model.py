"""End-to-end assembly: patchify, encoder, projector, query selection, decoder."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import decoder as D
from . import encoder as E
from . import params as P
from . import projector as PR
from .boxes import clip_boxes
from .config import ModelConfig
from .postprocess import DetectionSet, detr_select, write_detections
from .tensor import OpCounters, bilinear_sample, counting, tensor

# per-channel normalization applied to [0, 1] RGB input
PIXEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
PIXEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def param_spec(cfg: ModelConfig, num_groups: int = 1) -> P.Spec:
    spec = E.param_spec(cfg.encoder, *cfg.grid)
    spec.update(PR.param_spec(cfg.projector))
    spec.update(D.param_spec(cfg.decoder, num_groups))
    return spec


@dataclass(frozen=True)
class ParamCount:
    inference: int  # primary query group only
    training: int  # all query groups

    def millions(self) -> tuple[float, float]:
        return self.inference / 1e6, self.training / 1e6


def count_parameters(cfg: ModelConfig) -> ParamCount:
    return ParamCount(P.count(param_spec(cfg, 1)), P.count(param_spec(cfg, cfg.decoder.num_groups)))


def init_model(cfg: ModelConfig, num_groups: int = 1, seed: int | None = None) -> dict[str, np.ndarray]:
    return P.init_params(param_spec(cfg, num_groups), cfg.seed if seed is None else seed)


def resize_pos_embed(pos: np.ndarray, src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Bilinearly resample a (src_h * src_w, C) position table onto another grid."""
    if tuple(src) == tuple(dst):
        return pos
    gh, gw = dst
    ys, xs = np.meshgrid((np.arange(gh) + 0.5) / gh, (np.arange(gw) + 0.5) / gw, indexing="ij")
    # clamp to the outer pixel centres so edges replicate instead of fading to zero
    xs = np.clip(xs, 0.5 / src[1], 1 - 0.5 / src[1])
    ys = np.clip(ys, 0.5 / src[0], 1 - 0.5 / src[0])
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return bilinear_sample(pos.reshape(src[0], src[1], -1), pts)


@dataclass
class ForwardResult:
    outputs: list[D.LayerOutput]
    queries: list[D.QueryGroup]
    levels: list[E.FeatureMap]
    encoded: E.FeatureMap
    counters: OpCounters


def normalize_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    return tensor((image - PIXEL_MEAN) / PIXEL_STD)


def encode(image: np.ndarray, cfg: ModelConfig, params: dict,
           layout_mode: E.LayoutMode | str = E.LayoutMode.WINDOW_MAJOR_OPTIMIZED) -> E.FeatureMap:
    """Patchify and run the encoder blocks; returns the concatenated row-major map."""
    ep = P.sub(params, "encoder")
    h, w = image.shape[:2]
    if h % E.PATCH_SIZE or w % E.PATCH_SIZE:
        raise ValueError(f"image {h}x{w} is not divisible by {E.PATCH_SIZE}")
    pos = resize_pos_embed(ep["pos_embed"], cfg.grid, (h // E.PATCH_SIZE, w // E.PATCH_SIZE))
    f = E.patchify(normalize_image(image), ep["patch_embed.weight"], ep["patch_embed.bias"], pos)
    return E.encoder_forward(f, cfg.encoder, ep, layout_mode)


def forward(image: np.ndarray, cfg: ModelConfig, params: dict, num_groups: int = 1,
            layout_mode: E.LayoutMode | str = E.LayoutMode.WINDOW_MAJOR_OPTIMIZED) -> ForwardResult:
    """One full pass; ``num_groups`` > 1 runs the training-time query groups too."""
    with counting() as counters:
        encoded = encode(image, cfg, params, layout_mode)
        levels = PR.project(encoded, cfg.projector, P.sub(params, "projector"))
        queries = D.make_group_queries(levels, num_groups, cfg.decoder.num_queries, params)
        outputs = D.decoder_forward(queries, levels, cfg.decoder, params)
    return ForwardResult(outputs, queries, levels, encoded, counters)


@dataclass(frozen=True)
class FlopReport:
    flops: int  # multiply-adds, each counted as one operation
    raw_flops: int  # two operations per multiply-add
    permutations: int

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def count_flops(cfg: ModelConfig, input_size: int | None = None,
                layout_mode: E.LayoutMode | str = E.LayoutMode.WINDOW_MAJOR_OPTIMIZED,
                params: dict | None = None) -> FlopReport:
    """Measured by running one forward pass with op counters bound."""
    size = cfg.input_size if input_size is None else input_size
    params = init_model(cfg) if params is None else params
    image = synthetic_image(size, cfg.seed)
    c = forward(image, cfg, params, 1, layout_mode).counters
    return FlopReport(c.matmul_flops // 2, c.matmul_flops, c.permutations)


# ---------------------------------------------------------------- images

def synthetic_image(size: int, seed: int = 0) -> np.ndarray:
    """Deterministic (size, size, 3) uint8 pattern: gradients, rectangles and noise."""
    rng = np.random.default_rng([seed, size])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    img = np.stack([xx, yy, 0.5 * (xx + yy)], axis=-1) * 160
    for _ in range(6):
        x0, y0 = rng.integers(0, size * 3 // 4, 2)
        w, h = rng.integers(size // 16, size // 4, 2)
        img[y0:y0 + h, x0:x0 + w] = rng.integers(0, 256, 3)
    img += rng.normal(0, 8, img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3)


def load_image(path) -> np.ndarray:
    """(H, W, 3) image from a binary PPM or a ``.npy`` array (uint8 or float in [0, 1])."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        image = np.load(path, allow_pickle=False)
    elif path.suffix.lower() in (".ppm", ".pnm"):
        image = _read_ppm(path)
    else:
        raise ValueError(f"{path}: unsupported image format (use .ppm or .npy)")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{path}: expected an (H, W, 3) image, got shape {image.shape}")
    return image


def run_inference(cfg: ModelConfig, image: np.ndarray | None = None, out_path=None,
                  image_id: str = "synthetic", params: dict | None = None) -> DetectionSet:
    """Primary-group detections from the last decoder layer, top-K with K = num_queries."""
    if image is None:
        image = synthetic_image(cfg.input_size, cfg.seed)
    params = init_model(cfg) if params is None else params
    res = forward(image, cfg, params, 1)
    last = res.outputs[-1]
    boxes = clip_boxes(last.boxes[0].astype(np.float64))
    dets = detr_select(last.logits[0], boxes, cfg.decoder.num_queries, image_id)
    if out_path is not None:
        write_detections(out_path, dets)
    return dets
