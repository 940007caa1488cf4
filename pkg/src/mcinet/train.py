"""SGD training, evaluation with per-subject voting, and the architecture
comparison harness."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import zoo
from .data import LABELS, DataError, NormStats, SliceDataset, SplitResult, batch_indices, prepare, to_network_input
from .graph import (ModelGraph, backward, forward, freeze_through, load_weights, replace_head,
                    static_frontier)
from .layers import softmax, softmax_cross_entropy, softmax_cross_entropy_backward
from .tensor import argmax

log = logging.getLogger(__name__)

# reference accuracies reported for the four networks on real MCI-vs-normal MRI
PUBLISHED_ACCURACY = {"alexnet": 0.9683, "vgg16": 0.9395, "googlenet": 0.904, "resnet18": 0.8333}

COMPARISON_HEADER = ("architecture", "subject_accuracy", "slice_accuracy", "params", "train_seconds")


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class Seeds:
    split: int = 0
    shuffle: int = 0
    init: int = 0
    dropout: int = 0


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    # "features" freezes everything up to the builder's feature node; None trains all
    freeze_boundary: Optional[str] = "features"
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**d)


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# -- optimizer -----------------------------------------------------------

def sgd_momentum_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """In-place ``v = mu*v - lr*(g + wd*w); w += v`` for every name in ``grads``."""
    lr, mu, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    for name, g in grads.items():
        w = params[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= mu
        v -= lr * (g + wd * w) if wd else lr * g
        w += v


def _graph_grads(g: ModelGraph, bundles) -> Dict[str, np.ndarray]:
    out = {}
    for nid in g.trainable_ids():
        b = bundles.get(nid)
        if b is None or b.d_weights is None:
            continue
        out[f"{nid}.weight"] = b.d_weights
        out[f"{nid}.bias"] = b.d_bias
    return out


def _graph_params(g: ModelGraph) -> Dict[str, np.ndarray]:
    out = {}
    for n in g.param_nodes():
        if n.trainable:
            out[f"{n.id}.weight"] = n.params.weights
            out[f"{n.id}.bias"] = n.params.bias
    return out


# -- training ------------------------------------------------------------

@dataclass
class TrainHistory:
    loss: List[float] = field(default_factory=list)
    accuracy: List[float] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)

    def to_dict(self, include_timing: bool = False) -> dict:
        epochs = [{"epoch": i + 1, "loss": l, "accuracy": a}
                  for i, (l, a) in enumerate(zip(self.loss, self.accuracy))]
        if include_timing:
            for e, t in zip(epochs, self.epoch_seconds):
                e["seconds"] = t
        return {"epochs": epochs}

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2)


def apply_freeze(g: ModelGraph, boundary: Optional[str]) -> ModelGraph:
    if boundary is None:
        return g
    if boundary == "features":
        boundary = g.meta.get("feature_node")
        if boundary is None:
            return g
    return freeze_through(g, boundary)


def precompute(g: ModelGraph, x: np.ndarray, nodes, chunk: int = 32) -> Dict[str, np.ndarray]:
    """Eval-mode activations of ``nodes`` for every sample of ``x``."""
    parts: Dict[str, list] = {nid: [] for nid in nodes}
    for start in range(0, len(x), chunk):
        acts, _ = forward(g, x[start:start + chunk], "eval", outputs=nodes)
        for nid in nodes:
            parts[nid].append(acts[nid])
    return {nid: np.concatenate(v) for nid, v in parts.items()}


def train(g: ModelGraph, train_set: SliceDataset, cfg: TrainConfig, progress=None,
          reuse_static: bool = True):
    """Mini-batch SGD with momentum. Returns ``(g, history)``; ``g`` is updated in place.

    With ``reuse_static`` the outputs of the frozen deterministic part of the
    network are computed once and fed to every epoch instead of recomputed.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    apply_freeze(g, cfg.freeze_boundary)
    params = _graph_params(g)
    frontier = static_frontier(g) if reuse_static else []
    feats = precompute(g, train_set.x, frontier) if frontier else None
    velocity: Dict[str, np.ndarray] = {}
    history = TrainHistory()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        total_loss = 0.0
        correct = 0
        for bi, sel in enumerate(batch_indices(len(train_set), cfg.batch_size, cfg.seeds.shuffle, epoch)):
            y = train_set.labels[sel]
            key = (cfg.seeds.dropout, step)
            if feats is None:
                logits, cache = forward(g, train_set.x[sel], "train", rng_key=key)
            else:
                logits, cache = forward(g, None, "train", rng_key=key,
                                        given={nid: a[sel] for nid, a in feats.items()})
            loss, probs = softmax_cross_entropy(logits, y)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch + 1}, batch {bi + 1}")
            total_loss += loss * len(y)
            correct += int(np.sum(probs.argmax(axis=1) == y))
            if params:
                bundles = backward(g, cache, softmax_cross_entropy_backward(probs, y), input_grad=False)
                sgd_momentum_step(params, _graph_grads(g, bundles), velocity, cfg)
            step += 1
        history.loss.append(total_loss / len(train_set))
        history.accuracy.append(correct / len(train_set))
        history.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d loss %.5f acc %.4f", epoch + 1, cfg.epochs,
                 history.loss[-1], history.accuracy[-1])
        if progress is not None:
            progress(epoch + 1, history)
    return g, history


# -- evaluation ----------------------------------------------------------

def slice_probs(g: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Eval-mode class probabilities for one preprocessed 3 x H x W slice."""
    logits, _ = forward(g, x[None], "eval")
    if g.nodes[g.output_id].kind == "softmax-output":
        return logits[0]
    return softmax(logits)[0]


@dataclass
class EvalReport:
    slice_accuracy: float
    subject_accuracy: float
    confusion_matrix: List[List[int]]
    subjects: List[dict]
    slice_count: int
    config: Optional[dict] = None

    @property
    def subject_count(self) -> int:
        return len(self.subjects)

    def to_dict(self) -> dict:
        d = {"slice_accuracy": self.slice_accuracy, "subject_accuracy": self.subject_accuracy,
             "confusion_matrix": {"labels": list(LABELS), "rows_true_cols_predicted": self.confusion_matrix},
             "slice_count": self.slice_count, "subject_count": self.subject_count,
             "subjects": self.subjects}
        if self.config is not None:
            d["config"] = self.config
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def vote(predictions: Sequence[int]) -> int:
    """Majority label over a subject's slices; ties go to MCI."""
    mci = sum(1 for p in predictions if p == 1)
    return 1 if mci * 2 >= len(predictions) else 0


def evaluate(g: ModelGraph, test_set: SliceDataset, config: Optional[dict] = None) -> EvalReport:
    if len(test_set) == 0:
        raise DataError("test set is empty")
    per_subject: Dict[str, dict] = {}
    correct_slices = 0
    for i in range(len(test_set)):
        p = slice_probs(g, test_set.x[i])
        pred = argmax(p)
        truth = int(test_set.labels[i])
        correct_slices += pred == truth
        s = per_subject.setdefault(test_set.subject_ids[i], {
            "subject_id": test_set.subject_ids[i], "true": LABELS[truth], "slices": []})
        s["slices"].append({"plane": test_set.planes[i], "predicted": LABELS[pred],
                            "probability": float(p[pred]), "p_mci": float(p[1])})
    confusion = [[0, 0], [0, 0]]
    for s in per_subject.values():
        pred = vote([LABELS.index(sl["predicted"]) for sl in s["slices"]])
        s["predicted"] = LABELS[pred]
        s["p_mci"] = float(np.mean([sl["p_mci"] for sl in s["slices"]]))
        confusion[LABELS.index(s["true"])][pred] += 1
    total = sum(map(sum, confusion))
    return EvalReport(
        slice_accuracy=correct_slices / len(test_set),
        subject_accuracy=(confusion[0][0] + confusion[1][1]) / total,
        confusion_matrix=confusion,
        subjects=list(per_subject.values()),
        slice_count=len(test_set),
        config=config)


def predict(g: ModelGraph, image: np.ndarray, stats: NormStats):
    """Label and probability for one decoded 1 x C x H x W image."""
    size = g.input_shape[1:]
    p = slice_probs(g, to_network_input(image, size, stats))
    k = argmax(p)
    return LABELS[k], float(p[k])


# -- comparison ----------------------------------------------------------

@dataclass
class ComparisonReport:
    rows: List[dict]
    config: dict
    split_fingerprint: str

    @property
    def config_fingerprint(self) -> str:
        return fingerprint(self.config)

    def to_dict(self, include_timing: bool = False) -> dict:
        rows = [dict(r) for r in self.rows]
        if not include_timing:
            for r in rows:
                r["train_seconds"] = None
        return {"rows": rows, "config": self.config, "config_fingerprint": self.config_fingerprint,
                "split_fingerprint": self.split_fingerprint,
                "published_reference": PUBLISHED_ACCURACY}

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2)

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for r in self.rows:
            secs = f"{r['train_seconds']:.3f}" if include_timing else ""
            w.writerow([r["architecture"], f"{r['subject_accuracy']:.6f}",
                        f"{r['slice_accuracy']:.6f}", r["params"], secs])
        return buf.getvalue()


@dataclass
class ModelSpec:
    """How to instantiate a network for a run (serialized next to its weights)."""
    arch: str
    input_size: Optional[int] = None
    width: float = 1.0
    hidden: Optional[int] = None
    source_classes: int = 1000

    def build(self, seed: int = 0) -> ModelGraph:
        kwargs = {"input_size": self.input_size, "width": self.width, "seed": seed}
        if self.hidden is not None and self.arch in ("alexnet", "vgg16"):
            kwargs["hidden"] = self.hidden
        return zoo.build(self.arch, self.source_classes, **kwargs)


def transfer_model(spec: ModelSpec, cfg: TrainConfig, pretrained=None, class_count: int = 2) -> ModelGraph:
    """Build, optionally load pretrained weights, and swap in a fresh head."""
    g = spec.build(cfg.seeds.init)
    if pretrained is not None:
        load_weights(g, pretrained)
    replace_head(g, class_count, seed=cfg.seeds.init)
    return g


def run_one(spec: ModelSpec, split: SplitResult, cfg: TrainConfig, pretrained=None,
            datasets=None, progress=None):
    g = transfer_model(spec, cfg, pretrained)
    size = g.input_shape[1:]
    if datasets is None:
        train_ds = prepare(split.train, size)
        test_ds = prepare(split.test, size, train_ds.stats)
    else:
        train_ds, test_ds = datasets
    t0 = time.perf_counter()
    g, history = train(g, train_ds, cfg, progress=progress)
    seconds = time.perf_counter() - t0
    report = evaluate(g, test_ds)
    return g, history, report, seconds, train_ds.stats


def compare(archs: Sequence[str], split: SplitResult, cfg: TrainConfig, *,
            input_size: Optional[int] = None, width: float = 1.0, hidden: Optional[int] = None,
            pretrained: Optional[Dict[str, str]] = None) -> ComparisonReport:
    """Train and evaluate each architecture on the identical split and seeds."""
    pretrained = pretrained or {}
    cache: Dict[tuple, tuple] = {}
    rows = []
    for arch in archs:
        spec = ModelSpec(arch, input_size, width, hidden)
        size = input_size or zoo.NATIVE_INPUT[arch]
        if size not in cache:
            tr = prepare(split.train, size)
            cache[size] = (tr, prepare(split.test, size, tr.stats))
        g, _, report, seconds, _ = run_one(spec, split, cfg, pretrained.get(arch), cache[size])
        rows.append({"architecture": arch, "subject_accuracy": report.subject_accuracy,
                     "slice_accuracy": report.slice_accuracy, "params": g.parameter_count(),
                     "train_seconds": seconds})
        log.info("%s: subject accuracy %.4f", arch, report.subject_accuracy)
    rows.sort(key=lambda r: -r["subject_accuracy"])
    config = {"train": cfg.to_dict(), "architectures": list(archs), "input_size": input_size,
              "width": width, "hidden": hidden, "split_seed": split.seed, "split_fraction": split.fraction}
    return ComparisonReport(rows, config, split.fingerprint())
