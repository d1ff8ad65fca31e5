"""Desk-scale experiments: string-trained detector and the isolated-vs-string context contrast.

Each run is cached on disk under a key derived from its configuration, the
digit archive bytes and the package source, so re-running an unchanged
experiment reloads the recorded result instead of retraining.
"""

from __future__ import annotations

import ast
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .anchors import format_anchors, kmeans_anchors, parse_anchors
from .data import DigitSet, SynthConfig, generate_dataset
from .detector import LossWeights, TrainConfig, load_model, save_model, train
from .evaluation import EvalReport, evaluate
from .inference import letterbox, target_dims
from .net import SgdConfig

# Synthetic 2-3 digit strings are ~50 px wide, so every test image maps to a
# 128x128 network input; training scales bracket that shape.
DESK_SCALES = tuple((h, w) for h in (96, 128, 160) for w in (96, 128, 160))
# Thinner full-resolution layers nearly double samples per CPU-second.
DESK_WIDTHS = (8, 16, 32, 64, 128, 128)
SOURCE_MODULES = ("core", "data", "anchors", "net", "detector", "inference", "evaluation", "experiment")
# Stop at an epoch boundary before the run would pass 55 minutes.
DESK_BUDGET_S = 3300.0


def desk_train_config(**overrides) -> TrainConfig:
    """Small batches give four times the updates per CPU-second, and the
    heavier class weight keeps digit identity from lagging behind
    localisation; both matter when the whole run must fit in an hour.
    """
    base = dict(
        sgd=SgdConfig(learning_rate=1e-3, final_rate=5e-4, batch_size=16),
        weights=LossWeights(cls=3.0),
        epochs_max=60,
        patience=10,
        scale_choices=DESK_SCALES,
        widths=DESK_WIDTHS,
        seed=0,
        time_budget=DESK_BUDGET_S,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class RunSpec:
    """One training run: which strings to synthesize, and how to train on them."""

    name: str
    synth: SynthConfig
    train: TrainConfig = field(default_factory=desk_train_config)
    k: int = 3


@dataclass
class RunResult:
    name: str
    key: str
    seconds: float
    anchors: str
    history: list
    best_epoch: int
    model_path: Path


def box_shapes(samples, frame: str = "network"):
    """(w, h) of every ground-truth box, in letterboxed network pixels or source pixels."""
    shapes = []
    for s in samples:
        meta = letterbox(s.image, target_dims(s.image.shape))[1] if frame == "network" else None
        for a in s.annotations:
            b = meta.to_network(a.box) if meta else a.box
            shapes.append((b.width, b.height))
    return shapes


def _code_only(source: str) -> str:
    """Syntax tree of a module with docstrings removed; comments and layout never reach it."""
    tree = ast.parse(source)
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) and isinstance(getattr(body[0], "value", None), ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return ast.dump(tree)


def source_digest() -> str:
    """Hash of the code that can influence a training run's outcome."""
    h = hashlib.sha256()
    here = Path(__file__).resolve().parent
    for name in SOURCE_MODULES:
        h.update(_code_only((here / f"{name}.py").read_text(encoding="utf-8")).encode())
    return h.hexdigest()


def digits_digest(digits: DigitSet) -> str:
    h = hashlib.sha256()
    for im, label in zip(digits.images, digits.labels):
        h.update(repr((im.shape, label)).encode())
        h.update(im.tobytes())
    return h.hexdigest()


def run_key(spec: RunSpec, digits_hash: str) -> str:
    payload = json.dumps(
        {"synth": asdict(spec.synth), "train": asdict(spec.train), "k": spec.k, "digits": digits_hash, "src": source_digest()},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def run_training(spec: RunSpec, digits: DigitSet, cache_root, progress: Callable[[str], None] | None = None, digits_hash=None) -> RunResult:
    """Synthesize, cluster anchors, train; reuse the cached run when the key matches."""
    digits_hash = digits_hash or digits_digest(digits)
    key = run_key(spec, digits_hash)
    run_dir = Path(cache_root) / f"{spec.name}-{key}"
    record = run_dir / "result.json"
    if record.exists():
        data = json.loads(record.read_text())
        return RunResult(**{**data, "model_path": run_dir / "model.nsrm"})

    tr, va, _ = generate_dataset(spec.synth, digits)
    anchors, mean_iou = kmeans_anchors(box_shapes(tr.samples), spec.k, spec.train.seed)
    if progress:
        progress(f"[{spec.name}] {len(tr)} train / {len(va)} val samples; anchors mean IoU {mean_iou:.3f}")
    start = time.perf_counter()
    model, history = train(tr.samples, va.samples, anchors, spec.train, progress=progress)
    seconds = time.perf_counter() - start

    run_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, run_dir / "model.nsrm", spec.train)
    result = RunResult(spec.name, key, seconds, format_anchors(anchors), history.epochs, history.best_epoch, run_dir / "model.nsrm")
    data = asdict(result)
    data.pop("model_path")
    record.write_text(json.dumps(data, indent=1))
    return result


def evaluate_run(result: RunResult, test_samples) -> EvalReport:
    model, cfg = load_model(result.model_path)
    assert parse_anchors(result.anchors) == model.anchors
    return evaluate(model, test_samples, cfg.conf_threshold, cfg.nms_iou)


def string_spec(seed: int = 0, count: int = 7200, **train_overrides) -> RunSpec:
    """>= 5000 training strings of 2-3 digits (70% of `count`)."""
    return RunSpec("strings", SynthConfig(min_len=2, max_len=3, count=count, seed=seed), desk_train_config(seed=seed, **train_overrides))


def isolated_spec(seed: int = 0, count: int = 7200, **train_overrides) -> RunSpec:
    return RunSpec("isolated", SynthConfig(min_len=1, max_len=1, count=count, seed=seed), desk_train_config(seed=seed, **train_overrides))


@dataclass
class ContextResult:
    isolated: EvalReport
    strings: EvalReport

    @property
    def gap(self) -> float:
        return self.strings.overall_accuracy - self.isolated.overall_accuracy


def context_experiment(digits: DigitSet, cache_root, seed: int = 0, count: int = 7200, progress=None, **train_overrides):
    """Train on isolated digits and on strings; test both on the same string test split."""
    digits_hash = digits_digest(digits)
    s_spec = string_spec(seed, count, **train_overrides)
    i_spec = isolated_spec(seed, count, **train_overrides)
    _, _, test = generate_dataset(s_spec.synth, digits)
    runs = {}
    for spec in (s_spec, i_spec):
        runs[spec.name] = run_training(spec, digits, cache_root, progress, digits_hash)
    reports = {name: evaluate_run(r, test.samples) for name, r in runs.items()}
    return ContextResult(reports["isolated"], reports["strings"]), runs
