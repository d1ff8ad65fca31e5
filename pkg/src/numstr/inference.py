"""Test-time pipeline: input sizing, letterboxing, grid decoding and string assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import NUM_CLASSES, DEFAULT_NMS_IOU, BoundingBox, Detection, nms

INPUT_HEIGHT = 128
MIN_INPUT_WIDTH = 128
NARROW_LIMIT = 75
WIDTH_FACTOR = Fraction(17, 10)
STRIDE = 32
DEFAULT_CONF = 0.25
SLOT = 5 + NUM_CLASSES


def target_input_width(s_w: float, stride: int = STRIDE) -> int:
    """Network input width for a test image `s_w` pixels wide.

    Narrow images get 128; wider ones 1.7 x s_w rounded half-up to the
    nearest multiple of the stride.
    """
    if s_w < 1:
        raise ValueError(f"image width must be >= 1, got {s_w}")
    if s_w <= NARROW_LIMIT:
        return MIN_INPUT_WIDTH
    units = Fraction(s_w) * WIDTH_FACTOR / stride
    return int(math.floor(units + Fraction(1, 2))) * stride


def target_dims(image_shape: tuple[int, int]) -> tuple[int, int]:
    return INPUT_HEIGHT, target_input_width(image_shape[1])


# ---------------------------------------------------------------- letterbox


@dataclass(frozen=True)
class Letterbox:
    """Affine map from source pixels to network pixels: net = src * scale + pad."""

    scale_x: float
    scale_y: float
    pad_x: float
    pad_y: float
    src_width: int
    src_height: int

    def to_network(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(
            box.x_min * self.scale_x + self.pad_x,
            box.y_min * self.scale_y + self.pad_y,
            box.x_max * self.scale_x + self.pad_x,
            box.y_max * self.scale_y + self.pad_y,
        )

    def to_source(self, box: BoundingBox) -> BoundingBox:
        return BoundingBox(
            (box.x_min - self.pad_x) / self.scale_x,
            (box.y_min - self.pad_y) / self.scale_y,
            (box.x_max - self.pad_x) / self.scale_x,
            (box.y_max - self.pad_y) / self.scale_y,
        )


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Pixel-centre aligned bilinear resampling; exact identity at unit scale."""
    src = np.asarray(image, dtype=np.float32)
    h, w = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    y0, y1, wy = axis(out_h, h)
    x0, x1, wx = axis(out_w, w)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def letterbox(image: np.ndarray, target: tuple[int, int]) -> tuple[np.ndarray, Letterbox]:
    """Aspect-preserving resize into `target`, centred on a white (255) canvas."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ValueError(f"need a non-empty 2-D image, got shape {image.shape}")
    th, tw = target
    h, w = image.shape
    s = min(th / h, tw / w)
    nh = min(th, max(1, int(round(h * s))))
    nw = min(tw, max(1, int(round(w * s))))
    py, px = (th - nh) // 2, (tw - nw) // 2
    canvas = np.full((th, tw), 255.0, dtype=np.float32)
    canvas[py : py + nh, px : px + nw] = resize_bilinear(image, nh, nw)
    return canvas, Letterbox(nw / w, nh / h, float(px), float(py), w, h)


def to_network_input(canvas: np.ndarray) -> np.ndarray:
    """Map 0-255 intensity to [0, 1] ink darkness, so background is 0."""
    return ((255.0 - canvas) / 255.0).astype(np.float32)[None]


def prepare_image(image: np.ndarray, target: tuple[int, int], stride: int = STRIDE):
    """Returns ((1, H, W) float32 network input, Letterbox metadata)."""
    if target[0] % stride or target[1] % stride:
        raise ValueError(f"target dims {target} not divisible by stride {stride}")
    canvas, meta = letterbox(image, target)
    return to_network_input(canvas), meta


# ---------------------------------------------------------------- decoding


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _anchor_array(anchors) -> np.ndarray:
    return np.array([[a.width, a.height] for a in anchors], dtype=np.float64).reshape(-1, 2)


def decode_slots(pred: np.ndarray, anchors, stride: int = STRIDE):
    """Decode every slot of a (B*15, S_h, S_w) prediction.

    Returns a dict of (B, S_h, S_w) arrays: cx, cy, w, h, objectness, class
    probabilities (B, S_h, S_w, 10).
    """
    anc = _anchor_array(anchors)
    b = len(anc)
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 3 or pred.shape[0] != b * SLOT:
        raise ValueError(f"prediction shape {pred.shape} does not fit {b} anchors x {SLOT} values")
    sh, sw = pred.shape[1:]
    p = pred.reshape(b, SLOT, sh, sw)
    cols = np.arange(sw)[None, None, :]
    rows = np.arange(sh)[None, :, None]
    return {
        "cx": (sigmoid(p[:, 0]) + cols) * stride,
        "cy": (sigmoid(p[:, 1]) + rows) * stride,
        "w": anc[:, 0, None, None] * np.exp(p[:, 2]),
        "h": anc[:, 1, None, None] * np.exp(p[:, 3]),
        "obj": sigmoid(p[:, 4]),
        "cls": softmax(np.moveaxis(p[:, 5:], 1, -1), axis=-1),
    }


def decode_grid(
    pred: np.ndarray,
    anchors,
    stride: int = STRIDE,
    conf_threshold: float = DEFAULT_CONF,
    meta: Letterbox | None = None,
) -> list[Detection]:
    """Detections whose objectness x top class probability reaches `conf_threshold`.

    Boxes are mapped back to source pixels when letterbox metadata is given.
    Emission order is slot order (anchor, row, column).
    """
    if not 0.0 <= conf_threshold < 1.0:
        raise ValueError(f"conf_threshold must lie in [0, 1), got {conf_threshold}")
    d = decode_slots(pred, anchors, stride)
    digit = d["cls"].argmax(axis=-1)
    posterior = d["obj"] * d["cls"].max(axis=-1)
    out = []
    for idx in zip(*np.nonzero(posterior >= conf_threshold)):
        box = BoundingBox.from_center(d["cx"][idx], d["cy"][idx], d["w"][idx], d["h"][idx])
        if meta is not None:
            box = meta.to_source(box)
        out.append(Detection(box, int(digit[idx]), float(min(1.0, posterior[idx]))))
    return out


# ---------------------------------------------------------------- strings


@dataclass(frozen=True)
class StringReading:
    text: str
    probability: float
    detections: tuple

    @property
    def empty(self) -> bool:
        """True when no digit was read; probability is then 1 by convention."""
        return not self.detections


def reading_order(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (d.box.x_center, d.box.x_min, d.digit, -d.posterior, d.box.as_tuple()))


def assemble_string(dets: Sequence[Detection]) -> StringReading:
    """Left-to-right reading; probability is the product of digit posteriors."""
    ordered = reading_order(dets)
    text = "".join(str(d.digit) for d in ordered)
    prob = math.prod(d.posterior for d in ordered) if ordered else 1.0
    return StringReading(text, float(prob), tuple(ordered))


def predict_strings(
    model,
    images: Sequence[np.ndarray],
    conf_threshold: float = DEFAULT_CONF,
    nms_iou: float = DEFAULT_NMS_IOU,
    batch_size: int = 64,
) -> list[StringReading]:
    """Read many images; images sharing network input dims run as one batch."""
    from .net import forward

    groups: dict[tuple[int, int], list[int]] = {}
    for i, im in enumerate(images):
        im = np.asarray(im)
        if im.ndim != 2 or im.size == 0:
            raise ValueError(f"image {i}: need a non-empty 2-D raster")
        groups.setdefault(target_dims(im.shape), []).append(i)
    readings: list = [None] * len(images)
    stride = model.spec.stride
    for dims in sorted(groups):
        idxs = groups[dims]
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start : start + batch_size]
            prepared = [prepare_image(images[i], dims, stride) for i in chunk]
            x = np.stack([p[0] for p in prepared])
            out, _ = forward(model.spec, model.params, x, keep_cache=False)
            for k, i in enumerate(chunk):
                dets = decode_grid(out[k], model.anchors, stride, conf_threshold, prepared[k][1])
                readings[i] = assemble_string(nms(dets, nms_iou))
    return readings


def predict_string(model, image: np.ndarray, conf_threshold: float = DEFAULT_CONF, nms_iou: float = DEFAULT_NMS_IOU) -> StringReading:
    return predict_strings(model, [image], conf_threshold, nms_iou)[0]
