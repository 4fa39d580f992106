"""Video-level classification heads.

Two routes share the clip sampler:

* descriptor route: per-clip fc6 activations are averaged over a video and
  L2-normalized, then fed to a linear SVM trained by Pegasos-style
  subgradient descent;
* softmax route: the network is fine-tuned end to end and per-clip class
  probabilities are averaged to a video-level prediction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ops
from .errors import DegenerateError, EmptyInputError, InvalidRangeError, LabelError, ShapeError
from .layers import Network, no_grad
from .optim import SgdConfig, sgd_step
from .tensor import DTYPE, Rng
from .video import (Clip, SamplerConfig, VideoSource, augment, epoch_order, sample_clips,
                    shuffle_frames, temporal_jitter_sample)

log = logging.getLogger(__name__)


@dataclass
class VideoDescriptor:
    video_id: str
    vector: np.ndarray
    label: int | None = None


@dataclass
class LinearSvmModel:
    weights: np.ndarray
    bias: float
    l2: float
    epochs: int
    objective: list[float] = field(default_factory=list)

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.weights.shape[0]:
            raise ShapeError(f"descriptor width {x.shape[-1]} != model width {self.weights.shape[0]}")
        return x @ self.weights.astype(np.float64) + self.bias


def _stack_sorted(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Rows in lexicographic order so reductions ignore the input order."""
    m = np.stack([np.asarray(r, dtype=np.float64).ravel() for r in rows])
    return m[np.lexsort(m.T[::-1])]


# --------------------------------------------------------------- features


def _clip_batch(clips: Sequence[Clip], expected: tuple[int, ...]) -> np.ndarray:
    for c in clips:
        if tuple(c.data.shape) != expected:
            raise ShapeError(f"clip {c.video_id}@{c.start_frame} has shape {c.data.shape}, "
                             f"network expects {expected}")
    return np.stack([c.data for c in clips]).astype(DTYPE, copy=False)


def extract_features(net: Network, clips: Sequence[Clip], batch_size: int = 4) -> list[np.ndarray]:
    """Feature-layer activations, one vector per clip."""
    expected = tuple(net.spec.input_shape)
    out: list[np.ndarray] = []
    for i in range(0, len(clips), batch_size):
        batch = _clip_batch(clips[i:i + batch_size], expected)
        feats = net.features(batch)
        out.extend(f.reshape(-1).copy() for f in feats)
    return out


def extract_fc6(net: Network, clips: Sequence[Clip], batch_size: int = 4) -> list[np.ndarray]:
    """fc6 activations (before ReLU) of a C3D network, one 4096-vector per clip."""
    if net.spec.feature_layer != "fc6":
        raise ShapeError(f"network {net.spec.name} has no fc6 layer")
    return extract_features(net, clips, batch_size)


def aggregate_descriptor(clip_features: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of clip features followed by L2 normalization."""
    if len(clip_features) == 0:
        raise EmptyInputError("no clip features to aggregate")
    widths = {np.asarray(f).size for f in clip_features}
    if len(widths) != 1:
        raise ShapeError(f"clip features have differing widths {sorted(widths)}")
    mean = _stack_sorted(clip_features).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if not norm > 0 or not np.isfinite(norm):
        raise DegenerateError("mean clip feature is zero; descriptor undefined")
    return (mean / norm).astype(DTYPE)


def aggregate_softmax(clip_probs: Sequence[np.ndarray], tol: float = 1e-6) -> np.ndarray:
    """Average clip probability vectors into one video-level distribution."""
    if len(clip_probs) == 0:
        raise EmptyInputError("no clip probabilities to aggregate")
    m = _stack_sorted(clip_probs)
    if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > tol):
        raise InvalidRangeError("clip probabilities must be non-negative and sum to 1")
    return m.mean(axis=0).astype(DTYPE)


def video_descriptor(net: Network, video: VideoSource, cfg: SamplerConfig,
                     batch_size: int = 4) -> VideoDescriptor:
    """Centre-cropped eval clips -> features -> unit-norm descriptor."""
    eval_cfg = replace(cfg, train_mode=False)
    clips = [augment(c, eval_cfg) for c in sample_clips(video, eval_cfg)]
    feats = extract_features(net, clips, batch_size)
    return VideoDescriptor(video.id, aggregate_descriptor(feats), video.label)


# ---------------------------------------------------------------- svm head


def _check_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.all(np.isin(y, (-1, 1))):
        raise LabelError("SVM labels must be -1 or +1")
    return y.astype(np.float64)


def svm_objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, l2: float) -> float:
    return ops.hinge_loss(X @ w + b, y, l2, np.append(w, b))


def svm_train(descriptors: np.ndarray | Sequence[VideoDescriptor], labels, l2: float = 1e-4,
              epochs: int = 200, rng: Rng | None = None) -> LinearSvmModel:
    """Pegasos-style subgradient descent on the L2-regularized hinge objective.

    The bias is learned as the weight of a constant input feature and is
    regularized with the rest of the weights.  Steps are ``1 / (l2 * (t + t0))``
    with ``t0 = 1 / l2`` so the first step is 1 rather than ``1 / l2``.  Each
    epoch visits the data in a fresh seeded order and ends by evaluating the
    running average of all iterates so far; the best such average is kept, so
    ``objective`` (one entry per epoch) never increases.
    """
    if not isinstance(descriptors, np.ndarray):
        descriptors = np.stack([d.vector for d in descriptors])
    X = np.asarray(descriptors, dtype=np.float64)
    y = _check_binary(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"need one label per descriptor row, got {X.shape} and {y.shape}")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateError("SVM training needs at least one example of each class")
    if l2 <= 0 or epochs < 1:
        raise InvalidRangeError("l2 must be > 0 and epochs >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    w = np.zeros(d + 1)
    running = np.zeros(d + 1)
    radius = 1.0 / np.sqrt(l2)
    t0 = 1.0 / l2
    t = 0
    best, best_obj = w.copy(), np.inf
    objective: list[float] = []
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (l2 * (t + t0))
            violated = y[i] * (w @ Xa[i]) < 1.0
            w *= 1.0 - eta * l2
            if violated:
                w += (eta * y[i]) * Xa[i]
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            running += w
        avg = running / t
        obj = svm_objective(X, y, avg[:d], avg[d], l2)
        if obj < best_obj:
            best, best_obj = avg.copy(), obj
        objective.append(best_obj)
    return LinearSvmModel(best[:d].astype(DTYPE), float(best[d]), l2, epochs, objective)


def svm_predict(model: LinearSvmModel, descriptor) -> tuple[int, float]:
    """``(sign, score)``; a score of exactly 0 maps to +1."""
    x = descriptor.vector if isinstance(descriptor, VideoDescriptor) else descriptor
    x = np.asarray(x).ravel()
    score = float(model.decision(x))
    return (1 if score >= 0 else -1), score


def svm_to_entries(model: LinearSvmModel) -> dict[str, np.ndarray]:
    return {"svm.weights": model.weights.astype(DTYPE),
            "svm.bias": np.array([model.bias], dtype=DTYPE)}


def svm_from_entries(entries) -> LinearSvmModel:
    try:
        w, b = entries["svm.weights"], entries["svm.bias"]
    except KeyError as exc:
        raise ShapeError(f"SVM checkpoint lacks {exc}") from None
    return LinearSvmModel(np.asarray(w, dtype=DTYPE).ravel(), float(b.ravel()[0]), 0.0, 0)


# ------------------------------------------------------------ softmax head


@dataclass
class LossRecord:
    epoch: int
    iteration: int
    loss: float
    lr: float


def training_clip(video: VideoSource, sampler: SamplerConfig, rng: Rng,
                  shuffle: bool = False) -> Clip:
    """Temporally jittered, randomly cropped and flipped clip for one training step."""
    clip = temporal_jitter_sample(video, sampler.clip_len, rng, sampler.resize_to)
    clip = augment(clip, replace(sampler, train_mode=True), rng)
    if shuffle:
        clip = shuffle_frames(clip, rng)
    return clip


def finetune(net: Network, videos: Sequence[VideoSource], config: SgdConfig, epochs: int,
             rng: Rng, sampler: SamplerConfig, clips_per_video: int = 4,
             shuffle: bool = False,
             on_step: Callable[[LossRecord], None] | None = None) -> tuple[Network, list[LossRecord]]:
    """Mini-batch SGD with softmax cross-entropy on jittered clips.

    Each epoch draws ``clips_per_video`` clips per video in shuffled order.
    The learning rate is indexed by epoch or iteration according to
    ``config.interval_unit``.
    """
    if not videos:
        raise EmptyInputError("no training videos")
    k = net.spec.num_classes
    labels = np.array([v.label if v.label is not None else -1 for v in videos])
    if np.any(labels < 0) or np.any(labels >= k):
        raise LabelError(f"training labels must lie in [0, {k})")
    params = net.parameters()
    velocity: dict[str, np.ndarray] = {}
    trace: list[LossRecord] = []
    iteration = 0
    for epoch in range(epochs):
        order = epoch_order(len(videos), clips_per_video, rng)
        for b0 in range(0, order.size, config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            batch = np.stack([training_clip(videos[i], sampler, rng, shuffle).data for i in idx])
            logits = net.logits(batch, train=True)
            probs = ops.softmax(logits.astype(np.float64))
            loss = ops.cross_entropy_loss(probs, labels[idx])
            net.zero_grad()
            net.backward(ops.cross_entropy_grad_logits(probs, labels[idx]).astype(DTYPE))
            step = epoch if config.interval_unit == "epoch" else iteration
            sgd_step(params, net.gradients(), config, step, velocity)
            record = LossRecord(epoch, iteration, loss, config.lr_at(step))
            trace.append(record)
            if on_step is not None:
                on_step(record)
            iteration += 1
        epoch_loss = np.mean([r.loss for r in trace if r.epoch == epoch])
        log.info("epoch %d mean loss %.4f", epoch, epoch_loss)
    return net, trace


def clip_probabilities(net: Network, clips: Sequence[Clip], batch_size: int = 8) -> list[np.ndarray]:
    expected = tuple(net.spec.input_shape)
    out: list[np.ndarray] = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            probs = net.predict_proba(_clip_batch(clips[i:i + batch_size], expected))
            out.extend(p.copy() for p in probs)
    return out


def predict_video(net: Network, video: VideoSource, sampler: SamplerConfig,
                  rng: Rng | None = None, shuffle: bool = False) -> tuple[int, np.ndarray]:
    """Video class by averaging softmax outputs over centre-cropped sliding clips."""
    eval_cfg = replace(sampler, train_mode=False)
    clips = [augment(c, eval_cfg) for c in sample_clips(video, eval_cfg)]
    if shuffle:
        if rng is None:
            raise ValueError("frame shuffling needs an rng")
        clips = [shuffle_frames(c, rng) for c in clips]
    probs = aggregate_softmax(clip_probabilities(net, clips))
    return int(np.argmax(probs)), probs
