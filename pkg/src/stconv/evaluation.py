"""Evaluation bench: synthetic motion data, k-fold CV, projections, benchmarks."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import classify
from .errors import ConfigError, InsufficientDataError, StratificationError
from .layers import instantiate, no_grad
from .netspec import LayerSpec, NetSpec, build_net, count_flops, count_params
from .optim import SgdConfig
from .tensor import DTYPE, Rng, atomic_write_bytes, new_rng
from .video import (ManifestEntry, SamplerConfig, VideoSource, manifest_text, write_video)

log = logging.getLogger(__name__)


# ---------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Two classes of a square drifting horizontally (with wrap-around).

    Label 0 moves left-to-right, label 1 right-to-left.  Start position,
    colours and noise are drawn identically for both classes, so any single
    frame carries no class information.
    """

    videos_per_class: int = 40
    frames: int = 32
    height: int = 32
    width: int = 32
    square: int = 8
    speed: int = 2
    noise: float = 0.05
    seed: int = 0


def render_square_video(rng: Rng, spec: SyntheticSpec, direction: int) -> np.ndarray:
    """``F x 3 x H x W`` frames; ``direction`` is +1 (rightward) or -1 (leftward)."""
    h, w = spec.height, spec.width
    x0 = int(rng.integers(0, w))
    y0 = int(rng.integers(0, h - spec.square + 1))
    background = rng.uniform(0.0, 0.35, size=3)
    colour = rng.uniform(0.65, 1.0, size=3)
    frames = np.empty((spec.frames, 3, h, w), dtype=np.float64)
    rows = np.arange(y0, y0 + spec.square)
    for t in range(spec.frames):
        cols = (x0 + direction * spec.speed * t + np.arange(spec.square)) % w
        frame = np.broadcast_to(background[:, None, None], (3, h, w)).copy()
        frame[:, rows[:, None], cols[None, :]] = colour[:, None, None]
        frames[t] = frame
    frames += rng.normal(0.0, spec.noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(DTYPE)


def generate_synthetic(spec: SyntheticSpec) -> list[VideoSource]:
    """Deterministic balanced dataset; videos alternate between the two classes."""
    if spec.frames < 1 or spec.square > min(spec.height, spec.width):
        raise ConfigError("synthetic spec: need frames >= 1 and square <= frame size")
    videos = []
    for i in range(spec.videos_per_class):
        for label, direction in ((0, 1), (1, -1)):
            rng = new_rng(spec.seed, i, label)
            tag = "ltr" if label == 0 else "rtl"
            videos.append(VideoSource(f"{tag}_{i:04d}", render_square_video(rng, spec, direction),
                                      label))
    return videos


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path, fmt: str = "stt") -> Path:
    """Write videos (STT1 files or PPM directories) plus ``manifest.csv``; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "videos").mkdir(parents=True, exist_ok=True)
    entries = []
    for video in generate_synthetic(spec):
        target = out_dir / "videos" / (f"{video.id}.stt" if fmt == "stt" else video.id)
        write_video(target, video)
        entries.append(ManifestEntry(video.id, target, int(video.label), video.frame_count))
    manifest = out_dir / "manifest.csv"
    atomic_write_bytes(manifest, manifest_text(entries, out_dir).encode("utf-8"))
    return manifest


# ----------------------------------------------------------------- k-fold


def kfold_split(labels: Sequence[int], k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold: each class is shuffled and dealt round-robin to folds."""
    labels = np.asarray(labels)
    n = labels.size
    if k < 2 or k > n:
        raise ConfigError(f"k must be in [2, {n}], got {k}")
    rng = new_rng(seed)
    fold_of = np.empty(n, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise StratificationError(f"class {cls} has {members.size} members, fewer than k={k}")
        members = members[rng.permutation(members.size)]
        fold_of[members] = np.arange(members.size) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


def read_fold_file(path: str | Path, video_ids: Sequence[str]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed folds from a ``video_id,fold`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        assignment = {row["video_id"]: int(row["fold"]) for row in csv.DictReader(fh)}
    missing = [v for v in video_ids if v not in assignment]
    if missing:
        raise ConfigError(f"fold file lacks {len(missing)} videos, e.g. {missing[0]}")
    folds = np.array([assignment[v] for v in video_ids])
    return [(np.flatnonzero(folds != f), np.flatnonzero(folds == f)) for f in sorted(set(folds))]


# ------------------------------------------------------------- CV harness


@dataclass
class FoldReport:
    fold_index: int
    accuracy: float
    predictions: list[tuple[str, int, int]]


@dataclass
class CvSummary:
    mean_accuracy: float
    std_accuracy: float
    folds: list[FoldReport]


def fold_report(fold_index: int, predictions: list[tuple[str, int, int]]) -> FoldReport:
    if not predictions:
        raise InsufficientDataError("fold has no test predictions")
    correct = sum(1 for _, true, pred in predictions if true == pred)
    return FoldReport(fold_index, correct / len(predictions), predictions)


def summarize(folds: list[FoldReport]) -> CvSummary:
    """Mean and sample (n-1) standard deviation of fold accuracies."""
    accs = [f.accuracy for f in folds]
    std = statistics.stdev(accs) if len(accs) > 1 else 0.0
    return CvSummary(statistics.fmean(accs), std, folds)


def format_summary(summary: CvSummary) -> str:
    return (f"accuracy {100 * summary.mean_accuracy:.1f} ± "
            f"{100 * summary.std_accuracy:.1f} (%, {len(summary.folds)} folds, sample std)\n")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a fold needs to train and test one head."""

    net: str = "tiny-r2p1d"
    head: str = "softmax"  # softmax | svm
    num_classes: int = 2
    clip_len: int = 8
    overlap: int = 4
    resize: tuple[int, int] | None = None
    crop: tuple[int, int] = (28, 28)
    flip_prob: float = 0.5
    learning_rate: float = 0.05
    decay_factor: float = 0.1
    decay_interval: int = 2
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 8
    clips_per_video: int = 4
    shuffle_frames: bool = False
    svm_l2: float = 1e-4
    svm_epochs: int = 200
    weights: dict | None = field(default=None, compare=False, hash=False)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.clip_len, self.overlap, self.resize, self.crop,
                             flip_prob=self.flip_prob)

    @property
    def sgd(self) -> SgdConfig:
        return SgdConfig(self.learning_rate, self.decay_factor, self.decay_interval,
                         self.momentum, self.batch_size, "epoch")

    def netspec(self) -> NetSpec:
        return build_net(self.net, self.num_classes, self.clip_len, self.crop[0])


FoldFn = Callable[[PipelineConfig, list[VideoSource], list[VideoSource], int],
                  list[tuple[str, int, int]]]


def run_fold(cfg: PipelineConfig, train: list[VideoSource], test: list[VideoSource],
             seed: int) -> list[tuple[str, int, int]]:
    """Train one head on ``train`` and return ``(video_id, true, predicted)`` for ``test``."""
    net = instantiate(cfg.netspec(), new_rng(seed, 1))
    if cfg.weights is not None:
        net.load_state_dict(cfg.weights, strict=False)
    if cfg.head == "softmax":
        classify.finetune(net, train, cfg.sgd, cfg.epochs, new_rng(seed, 2), cfg.sampler,
                          cfg.clips_per_video, cfg.shuffle_frames)
        shuffle_rng = new_rng(seed, 3)
        return [(v.id, int(v.label),
                 classify.predict_video(net, v, cfg.sampler, shuffle_rng, cfg.shuffle_frames)[0])
                for v in test]
    if cfg.head == "svm":
        train_desc = [classify.video_descriptor(net, v, cfg.sampler) for v in train]
        y = np.array([1 if v.label == 1 else -1 for v in train])
        model = classify.svm_train(train_desc, y, cfg.svm_l2, cfg.svm_epochs, new_rng(seed, 4))
        out = []
        for v in test:
            sign, _ = classify.svm_predict(model, classify.video_descriptor(net, v, cfg.sampler))
            out.append((v.id, int(v.label), 1 if sign > 0 else 0))
        return out
    raise ConfigError(f"unknown head {cfg.head!r} (choose softmax or svm)")


def evaluate_cv(cfg: PipelineConfig, videos: list[VideoSource], k: int = 5, seed: int = 42,
                folds: list[tuple[np.ndarray, np.ndarray]] | None = None,
                fold_fn: FoldFn = run_fold) -> CvSummary:
    """Train and test once per fold; report mean +- sample std of accuracy."""
    if folds is None:
        folds = kfold_split([v.label for v in videos], k, seed)
    reports = []
    for f, (train_idx, test_idx) in enumerate(folds):
        preds = fold_fn(cfg, [videos[i] for i in train_idx], [videos[i] for i in test_idx],
                        seed * 1000 + f)
        reports.append(fold_report(f, preds))
        log.info("fold %d accuracy %.4f", f, reports[-1].accuracy)
    return summarize(reports)


def report_csv(summary: CvSummary) -> str:
    lines = ["fold,accuracy"] + [f"{r.fold_index},{r.accuracy!r}" for r in summary.folds]
    return "\n".join(lines) + "\n"


def predictions_csv(summary: CvSummary) -> str:
    lines = ["fold,video_id,true,predicted"]
    for r in summary.folds:
        lines += [f"{r.fold_index},{vid},{t},{p}" for vid, t, p in r.predictions]
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------- PCA


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ConfigError("jacobi_eigh needs a square symmetric matrix")
    v = np.eye(n)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(max(0.0, np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # theta**2 would overflow; t ~ 1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


@dataclass
class PcaResult:
    projection: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray  # D x out_dims, orthonormal columns
    mean: np.ndarray


def project_pca(features: np.ndarray, out_dims: int = 2, solver: str = "lapack") -> PcaResult:
    """Centre and project onto the leading covariance eigenvectors.

    ``solver='jacobi'`` uses :func:`jacobi_eigh` (small D only); the default
    uses LAPACK, switching to the N x N Gram matrix when N < D.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("PCA needs at least 2 samples in an N x D matrix")
    n, d = x.shape
    out_dims = min(out_dims, d)
    mean = x.mean(axis=0)
    xc = x - mean
    total = float(np.sum(xc * xc)) / (n - 1)
    if solver == "jacobi":
        vals, vecs = jacobi_eigh(xc.T @ xc / (n - 1))
        comps = vecs[:, :out_dims]
    elif solver == "lapack":
        if n < d:
            vals, u = np.linalg.eigh(xc @ xc.T / (n - 1))
            order = np.argsort(-vals, kind="stable")[:out_dims]
            vals = vals[order]
            comps = xc.T @ u[:, order]
            norms = np.linalg.norm(comps, axis=0)
            comps = comps / np.where(norms > 0, norms, 1.0)
        else:
            vals, vecs = np.linalg.eigh(xc.T @ xc / (n - 1))
            order = np.argsort(-vals, kind="stable")
            vals, comps = vals[order], vecs[:, order[:out_dims]]
    else:
        raise ConfigError(f"unknown PCA solver {solver!r}")
    vals = np.clip(vals[:out_dims], 0.0, None)
    ratios = vals / total if total > 0 else np.zeros(out_dims)
    # deterministic sign: largest-magnitude loading positive
    for j in range(comps.shape[1]):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaResult(xc @ comps, np.clip(ratios, 0.0, 1.0), comps, mean)


# ------------------------------------------------------------------ t-SNE


def _sq_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_probabilities(x: np.ndarray, perplexity: float, tol: float = 1e-5,
                              max_iter: int = 200) -> np.ndarray:
    """Row-stochastic P(j|i) with per-point Gaussian precision found by bisection.

    Each row's entropy (nats) is matched to ``log(perplexity)`` within ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= perplexity < n:
        raise ConfigError(f"perplexity must be in [1, N={n}), got {perplexity}")
    dist = _sq_distances(x)
    target = math.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(dist[i], i)
        di = di - di.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            e = np.exp(-di * beta)
            s = e.sum()
            h = math.log(s) + beta * float(di @ e) / s
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        row = e / s
        p[i, :i] = row[:i]
        p[i, i + 1:] = row[i:]
    return p


def joint_probabilities(cond: np.ndarray) -> np.ndarray:
    p = cond + cond.T
    return p / p.sum()


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    min_gain: float = 0.01


def project_tsne(features: np.ndarray, perplexity: float = 30.0, iters: int = 1000,
                 seed: int = 42, config: TsneConfig | None = None) -> np.ndarray:
    """Exact O(N^2) t-SNE to two dimensions."""
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n > 5000:
        raise ConfigError("exact t-SNE is limited to N <= 5000")
    cfg = replace(config or TsneConfig(), perplexity=perplexity, iterations=iters)
    p = joint_probabilities(conditional_probabilities(x, cfg.perplexity))
    p = np.maximum(p, 1e-12)
    rng = new_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(cfg.iterations):
        exag = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (exag * p - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        momentum = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
    return y.astype(DTYPE)


# ------------------------------------------------------------- embeddings


def embedding_csv(points: np.ndarray, labels: Sequence[int], ids: Sequence[str] | None = None) -> str:
    lines = ["x,y,class" + (",video_id" if ids is not None else "")]
    for i, ((px, py), c) in enumerate(zip(np.asarray(points, dtype=np.float64), labels)):
        row = f"{float(px)!r},{float(py)!r},{int(c)}"
        if ids is not None:
            row += f",{ids[i]}"
        lines.append(row)
    return "\n".join(lines) + "\n"


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def embedding_svg(points: np.ndarray, labels: Sequence[int], size: int = 480,
                  title: str = "") -> str:
    """Self-contained SVG scatter plot, one colour per class."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    margin = 20
    scaled = margin + (pts - lo) / span * (size - 2 * margin)
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
              f'viewBox="0 0 {size} {size}">\n')
    out.write(f'<rect width="{size}" height="{size}" fill="white"/>\n')
    if title:
        out.write(f'<text x="{margin}" y="14" font-size="12">{title}</text>\n')
    for (sx, sy), c in zip(scaled, labels):
        colour = _PALETTE[int(c) % len(_PALETTE)]
        out.write(f'<circle cx="{sx:.2f}" cy="{size - sy:.2f}" r="3" fill="{colour}"/>\n')
    out.write("</svg>\n")
    return out.getvalue()


# -------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    name: str
    input_shape: tuple[int, ...]
    params: int
    flops: int
    median_s: float
    min_s: float
    max_s: float


def _as_net(target: NetSpec | LayerSpec, input_shape: Sequence[int]) -> NetSpec:
    if isinstance(target, NetSpec):
        return replace(target, input_shape=tuple(input_shape[1:]))
    return NetSpec(target.name, tuple(input_shape[1:]), (target,))


def benchmark_conv(target: NetSpec | LayerSpec, input_shape: Sequence[int], repetitions: int = 3,
                   seed: int = 42) -> BenchRow:
    """Median forward wall time and FLOP count for a layer or network."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    net = _as_net(target, input_shape)
    model = instantiate(net, new_rng(seed))
    x = new_rng(seed, 9).standard_normal(tuple(input_shape)).astype(DTYPE)
    times = []
    with no_grad():
        for _ in range(repetitions):
            start = time.perf_counter()
            model.forward(x)
            times.append(max(time.perf_counter() - start, 1e-9))
    return BenchRow(net.name, tuple(input_shape), count_params(net), count_flops(net, input_shape),
                    statistics.median(times), min(times), max(times))


def bench_csv(rows: Sequence[BenchRow]) -> str:
    lines = ["name,input_shape,params,flops,median_s,min_s,max_s"]
    for r in rows:
        lines.append(f"{r.name},{'x'.join(map(str, r.input_shape))},{r.params},{r.flops},"
                     f"{r.median_s:.6f},{r.min_s:.6f},{r.max_s:.6f}")
    return "\n".join(lines) + "\n"
