"""Grid detection head: target assignment, sum-squared-error loss, training and checkpoints."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .anchors import Anchor, parse_anchors, shape_iou
from .core import DEFAULT_NMS_IOU, DigitAnnotation, StringSample, TrainingError
from .inference import DEFAULT_CONF, SLOT, letterbox, predict_strings, sigmoid, softmax, to_network_input
from .net import NetSpec, SgdConfig, backward, default_spec, forward, init_params, load_params, save_params, sgd_step, zeros_like_params

log = logging.getLogger(__name__)

HEAD_GAIN = 0.01
DEFAULT_SCALES = tuple((h, w) for h in (96, 128, 160) for w in (192, 256, 320))


@dataclass
class LossWeights:
    coord: float = 5.0
    obj: float = 1.0
    noobj: float = 0.5
    cls: float = 1.0


@dataclass
class TrainConfig:
    sgd: SgdConfig = field(default_factory=SgdConfig)
    epochs_max: int = 50
    patience: int = 5
    multi_scale_every: int = 10
    scale_choices: tuple = DEFAULT_SCALES
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    conf_threshold: float = DEFAULT_CONF
    nms_iou: float = DEFAULT_NMS_IOU
    widths: tuple = (16, 32, 64, 64, 128, 128)
    class_gain: float = 1.0
    time_budget: float = 0.0

    def __post_init__(self):
        self.scale_choices = tuple(tuple(int(v) for v in s) for s in self.scale_choices)
        self.widths = tuple(int(w) for w in self.widths)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.time_budget < 0:
            raise ValueError("time_budget must be >= 0 (0 disables it)")
        if self.epochs_max < 1 or self.multi_scale_every < 1:
            raise ValueError("epochs_max and multi_scale_every must be >= 1")
        if not self.scale_choices:
            raise ValueError("scale_choices is empty")
        stride = 2 ** (len(self.widths) - 1)
        for h, w in self.scale_choices:
            if h % stride or w % stride or h <= 0 or w <= 0:
                raise ValueError(f"scale {h}x{w} is not divisible by stride {stride}")


@dataclass
class Model:
    spec: NetSpec
    params: list
    anchors: list

    @property
    def stride(self) -> int:
        return self.spec.stride


def new_model(anchors: Sequence[Anchor], seed: int = 0, widths=(16, 32, 64, 64, 128, 128), dtype=np.float32, class_gain: float = 1.0) -> Model:
    """Fresh detector. Box and objectness rows of the head start near zero so
    exp(t_w) stays tame; class rows get `class_gain` times the usual scale.
    """
    spec = default_spec(len(anchors) * SLOT, widths)
    params = init_params(spec, seed, dtype, head_gain=HEAD_GAIN)
    head = params[-2]
    for b in range(len(anchors)):
        head[b * SLOT + 5 : (b + 1) * SLOT] *= class_gain / HEAD_GAIN
    return Model(spec, params, list(anchors))


# ---------------------------------------------------------------- targets


@dataclass
class TargetTensor:
    """Per-slot regression targets plus the responsibility mask.

    values has the prediction layout (B*15, S_h, S_w): x/y offsets within the
    cell, log width/height ratios to the anchor, objectness, one-hot class.
    """

    values: np.ndarray
    mask: np.ndarray
    owner: np.ndarray
    collisions: int = 0


def _annotations(sample) -> list[DigitAnnotation]:
    if isinstance(sample, StringSample):
        return list(sample.annotations)
    return list(sample)


def assign_targets(sample, anchors: Sequence[Anchor], grid: tuple[int, int], stride: int) -> TargetTensor:
    """Give each digit to the cell holding its centre and the best-IoU anchor there.

    When two digits claim the same slot the larger box keeps it and the other
    is counted in `collisions`.
    """
    anns = _annotations(sample)
    sh, sw = grid
    b = len(anchors)
    anc = np.array([[a.width, a.height] for a in anchors], dtype=np.float64)
    values = np.zeros((b, SLOT, sh, sw), dtype=np.float64)
    mask = np.zeros((b, sh, sw), dtype=bool)
    owner = np.full((b, sh, sw), -1, dtype=np.int64)
    collisions = 0
    order = sorted(range(len(anns)), key=lambda i: (-anns[i].box.area, i))
    for i in order:
        box = anns[i].box
        gx, gy = box.x_center / stride, box.y_center / stride
        col = min(max(int(math.floor(gx)), 0), sw - 1)
        row = min(max(int(math.floor(gy)), 0), sh - 1)
        best = int(shape_iou(np.array([[box.width, box.height]]), anc)[0].argmax())
        if mask[best, row, col]:
            collisions += 1
            continue
        mask[best, row, col] = True
        owner[best, row, col] = i
        v = values[best, :, row, col]
        v[0] = gx - col
        v[1] = gy - row
        v[2] = math.log(box.width / anc[best, 0])
        v[3] = math.log(box.height / anc[best, 1])
        v[4] = 1.0
        v[5 + anns[i].digit] = 1.0
    return TargetTensor(values.reshape(b * SLOT, sh, sw), mask, owner, collisions)


def _logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def targets_to_prediction(target: TargetTensor, confidence: float = 30.0) -> np.ndarray:
    """A raw prediction tensor whose decoding reproduces the target boxes."""
    b = target.mask.shape[0]
    v = target.values.reshape(b, SLOT, *target.mask.shape[1:])
    pred = np.zeros_like(v)
    pred[:, 0] = _logit(v[:, 0])
    pred[:, 1] = _logit(v[:, 1])
    pred[:, 2] = v[:, 2]
    pred[:, 3] = v[:, 3]
    pred[:, 4] = np.where(target.mask, confidence, -confidence)
    pred[:, 5:] = v[:, 5:] * confidence
    return pred.reshape(b * SLOT, *target.mask.shape[1:])


# ---------------------------------------------------------------- loss


def detection_loss(pred: np.ndarray, target: TargetTensor, weights: LossWeights | None = None):
    """Weighted sum-squared error; returns (loss, gradient w.r.t. pred, term dict).

    Coordinates and class probabilities count only at responsible slots,
    objectness everywhere (with the no-object weight elsewhere). x/y offsets
    and objectness are squashed by the logistic function, class scores by a
    softmax, before comparison with the targets. Batched inputs (N, ...) are
    summed over the batch.
    """
    weights = weights or LossWeights()
    pred = np.asarray(pred)
    values, mask = np.asarray(target.values), np.asarray(target.mask)
    if pred.shape != values.shape:
        from .net import ShapeError

        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {values.shape}")
    batched = pred.ndim == 4
    if not batched:
        pred, values, mask = pred[None], values[None], mask[None]
    n, _, sh, sw = pred.shape
    b = mask.shape[1]
    p = pred.astype(np.float64).reshape(n, b, SLOT, sh, sw)
    t = values.astype(np.float64).reshape(n, b, SLOT, sh, sw)
    m = mask.astype(np.float64)
    g = np.zeros_like(p)

    sxy = sigmoid(p[:, :, 0:2])
    dxy = sxy - t[:, :, 0:2]
    dwh = p[:, :, 2:4] - t[:, :, 2:4]
    coord = weights.coord * (m[:, :, None] * (dxy**2)).sum() + weights.coord * (m[:, :, None] * dwh**2).sum()
    g[:, :, 0:2] = weights.coord * m[:, :, None] * 2 * dxy * sxy * (1 - sxy)
    g[:, :, 2:4] = weights.coord * m[:, :, None] * 2 * dwh

    so = sigmoid(p[:, :, 4])
    do = so - t[:, :, 4]
    ow = weights.obj * m + weights.noobj * (1 - m)
    obj_resp = weights.obj * (m * do**2).sum()
    obj_none = weights.noobj * ((1 - m) * do**2).sum()
    g[:, :, 4] = ow * 2 * do * so * (1 - so)

    probs = softmax(p[:, :, 5:], axis=2)
    dc = probs - t[:, :, 5:]
    cls = weights.cls * (m[:, :, None] * dc**2).sum()
    up = weights.cls * m[:, :, None] * 2 * dc
    g[:, :, 5:] = probs * (up - (up * probs).sum(axis=2, keepdims=True))

    loss = coord + obj_resp + obj_none + cls
    grad = g.reshape(pred.shape).astype(pred.dtype, copy=False)
    if not batched:
        grad = grad[0]
    terms = {"coord": coord, "obj": obj_resp, "noobj": obj_none, "cls": cls}
    return float(loss), grad, terms


# ---------------------------------------------------------------- training


@dataclass
class History:
    epochs: list = field(default_factory=list)
    scale_schedule: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    stopped_budget: bool = False
    collisions: int = 0


def letterbox_batch(samples: Sequence[StringSample], dims: tuple[int, int], anchors, stride: int):
    xs, targets = [], []
    collisions = 0
    grid = (dims[0] // stride, dims[1] // stride)
    for s in samples:
        canvas, meta = letterbox(s.image, dims)
        xs.append(to_network_input(canvas))
        anns = [DigitAnnotation(a.digit, meta.to_network(a.box)) for a in s.annotations]
        t = assign_targets(anns, anchors, grid, stride)
        collisions += t.collisions
        targets.append(t)
    stacked = TargetTensor(
        np.stack([t.values for t in targets]),
        np.stack([t.mask for t in targets]),
        np.stack([t.owner for t in targets]),
        collisions,
    )
    return np.stack(xs), stacked


def string_accuracy(model: Model, samples: Sequence[StringSample], conf_threshold=DEFAULT_CONF, nms_iou=DEFAULT_NMS_IOU) -> float:
    readings = predict_strings(model, [s.image for s in samples], conf_threshold, nms_iou)
    return sum(r.text == s.label for r, s in zip(readings, samples)) / len(samples)


def _draw_scale(rng: np.random.Generator, choices, current):
    options = [c for c in choices if c != current] or list(choices)
    return options[int(rng.integers(len(options)))]


def train(
    train_set: Sequence[StringSample],
    val_set: Sequence[StringSample],
    anchors: Sequence[Anchor],
    cfg: TrainConfig | None = None,
    evaluate_fn: Callable[[Model], float] | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[Model, History]:
    """Mini-batch SGD with multi-scale inputs and early stopping on validation string accuracy.

    Returns the best-validation model and the per-epoch history.
    """
    cfg = cfg or TrainConfig()
    train_samples = list(train_set)
    val_samples = list(val_set)
    if not train_samples or not val_samples:
        raise ValueError("training and validation sets must be non-empty")
    anchors = list(anchors)
    model = new_model(anchors, cfg.seed, cfg.widths, class_gain=cfg.class_gain)
    stride = model.stride
    if evaluate_fn is None:
        evaluate_fn = lambda m: string_accuracy(m, val_samples, cfg.conf_threshold, cfg.nms_iou)  # noqa: E731

    rng = np.random.default_rng([cfg.seed, 0x5452])
    params = model.params
    velocity = zeros_like_params(params)
    bs = cfg.sgd.batch_size
    per_epoch = math.ceil(len(train_samples) / bs)
    total = per_epoch * cfg.epochs_max
    history = History()
    best_acc, best_params, since_best = -1.0, None, 0
    scale = None
    step = 0
    started = time.perf_counter()
    for epoch in range(cfg.epochs_max):
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), bs):
            if step % cfg.multi_scale_every == 0:
                scale = _draw_scale(rng, cfg.scale_choices, scale)
                history.scale_schedule.append((step, scale))
            batch = [train_samples[i] for i in order[start : start + bs]]
            x, target = letterbox_batch(batch, scale, anchors, stride)
            history.collisions += target.collisions
            out, cache = forward(model.spec, params, x)
            loss, grad, _ = detection_loss(out, target, cfg.weights)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {step}")
            grads, _ = backward(cache, grad / len(batch), need_input_grad=False)
            frac = step / max(1, total - 1)
            lr = cfg.sgd.learning_rate + (cfg.sgd.final_rate - cfg.sgd.learning_rate) * frac
            try:
                params, velocity = sgd_step(params, grads, velocity, cfg.sgd, lr)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {step}: {exc}") from exc
            losses.append(loss / len(batch))
            step += 1
        model = Model(model.spec, params, anchors)
        acc = float(evaluate_fn(model))
        history.epochs.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_accuracy": acc})
        if progress:
            progress(f"epoch {epoch}: loss {np.mean(losses):.4f} val_accuracy {acc:.4f}")
        if acc > best_acc:
            best_acc, best_params, since_best = acc, [p.copy() for p in params], 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_early = True
                break
        if cfg.time_budget:
            # stop if another epoch of the average length would overrun the budget
            elapsed = time.perf_counter() - started
            if elapsed * (epoch + 2) / (epoch + 1) > cfg.time_budget:
                history.stopped_budget = epoch + 1 < cfg.epochs_max
                break
    return Model(model.spec, best_params, anchors), history


# ---------------------------------------------------------------- checkpoints


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ";".join(_format_value(x) for x in v)
    return repr(v)


def config_lines(cfg: TrainConfig) -> list[str]:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, dict):
            lines += [f"{key}.{k}={v!r}" for k, v in value.items()]
        elif key == "scale_choices":
            lines.append(f"{key}=" + ";".join(f"{h}x{w}" for h, w in value))
        elif key == "widths":
            lines.append(f"{key}=" + ",".join(map(str, value)))
        else:
            lines.append(f"{key}={value!r}")
    return lines


def parse_config_lines(lines: Sequence[str]) -> TrainConfig:
    raw: dict[str, str] = {}
    for line in lines:
        if "=" in line:
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
    sgd = {k[4:]: float(v) if k != "sgd.batch_size" else int(v) for k, v in raw.items() if k.startswith("sgd.")}
    w = {k[8:]: float(v) for k, v in raw.items() if k.startswith("weights.")}
    kwargs = {}
    for key, conv in (("epochs_max", int), ("patience", int), ("multi_scale_every", int), ("seed", int), ("conf_threshold", float), ("nms_iou", float), ("class_gain", float), ("time_budget", float)):
        if key in raw:
            kwargs[key] = conv(raw[key])
    if "scale_choices" in raw:
        kwargs["scale_choices"] = tuple(tuple(int(x) for x in s.split("x")) for s in raw["scale_choices"].split(";"))
    if "widths" in raw:
        kwargs["widths"] = tuple(int(x) for x in raw["widths"].split(","))
    return TrainConfig(sgd=SgdConfig(**sgd), weights=LossWeights(**w), **kwargs)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta")


def save_model(model: Model, path, cfg: TrainConfig | None = None) -> None:
    save_params(path, model.spec, model.params)
    lines = ["#numstr-model=1"]
    lines += [f"anchor={a.width!r} {a.height!r}" for a in model.anchors]
    if cfg is not None:
        lines += config_lines(cfg)
    sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> tuple[Model, TrainConfig | None]:
    spec, params = load_params(path)
    meta = sidecar_path(path)
    if not meta.exists():
        raise FileNotFoundError(f"missing model sidecar {meta}")
    lines = meta.read_text(encoding="utf-8").splitlines()
    anchors = parse_anchors("\n".join(l.split("=", 1)[1] for l in lines if l.startswith("anchor=")))
    cfg_lines = [l for l in lines if not l.startswith(("anchor=", "#"))]
    cfg = parse_config_lines(cfg_lines) if cfg_lines else None
    if spec.out_channels != len(anchors) * SLOT:
        raise ValueError(f"head has {spec.out_channels} channels but {len(anchors)} anchors are recorded")
    return Model(spec, params, anchors), cfg
