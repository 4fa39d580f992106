"""Frame-sequence ingestion, clip sampling and training-time augmentation.

Videos are held as float32 arrays of shape ``F x 3 x H x W`` with values in
``[0, 1]``; clips are ``3 x T x H x W``.  Videos shorter than a clip are
padded by repeating their last frame, and trailing frames that do not fill a
whole clip are dropped.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, GeometryError, ShapeError
from .tensor import DTYPE, Rng, load_tensor, save_tensor

MANIFEST_FIELDS = ("video_id", "path", "label", "frames")


@dataclass
class VideoSource:
    id: str
    frames: np.ndarray  # F x 3 x H x W
    label: int | None = None

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[1] != 3 or self.frames.shape[0] < 1:
            raise ShapeError(f"video {self.id}: frames must be F x 3 x H x W, got {self.frames.shape}")

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]


@dataclass
class Clip:
    video_id: str
    start_frame: int
    data: np.ndarray  # 3 x T x H x W


@dataclass(frozen=True)
class SamplerConfig:
    clip_len: int = 16
    overlap: int = 8
    resize_to: tuple[int, int] | None = (128, 171)
    crop: tuple[int, int] = (112, 112)
    train_mode: bool = False
    flip_prob: float = 0.5
    mean: tuple[float, float, float] | None = None  # per-channel offset subtracted after cropping

    def __post_init__(self) -> None:
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        if not 0 <= self.overlap < self.clip_len:
            raise ConfigError(f"overlap must be in [0, clip_len), got {self.overlap}")

    @property
    def stride(self) -> int:
        return self.clip_len - self.overlap


# ------------------------------------------------------------------ resize


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes (``... x H x W``)."""
    if out_h < 1 or out_w < 1:
        raise GeometryError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = frames.shape[-2:]
    if (h, w) == (out_h, out_w):
        return frames.astype(DTYPE, copy=True)
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    f = frames.astype(np.float64)
    top = f[..., y0, :] * (1 - fy)[:, None] + f[..., y1, :] * fy[:, None]
    out = top[..., x0] * (1 - fx) + top[..., x1] * fx
    return out.astype(DTYPE)


# ---------------------------------------------------------------- sampling


def padded_frame_count(frame_count: int, clip_len: int) -> int:
    return max(frame_count, clip_len)


def clip_starts(frame_count: int, clip_len: int, overlap: int) -> list[int]:
    """Start indices 0, s, 2s, ... with ``s = clip_len - overlap``."""
    stride = clip_len - overlap
    if stride < 1:
        raise ConfigError("overlap must be smaller than clip_len")
    fp = padded_frame_count(frame_count, clip_len)
    count = (fp - clip_len) // stride + 1
    return [i * stride for i in range(count)]


def _clip_frames(frames: np.ndarray, start: int, clip_len: int) -> np.ndarray:
    idx = np.minimum(np.arange(start, start + clip_len), frames.shape[0] - 1)
    return frames[idx].transpose(1, 0, 2, 3)


def _resized(video: VideoSource, resize_to: tuple[int, int] | None) -> np.ndarray:
    if resize_to is None:
        return video.frames
    return resize_bilinear(video.frames, *resize_to)


def sample_clips(video: VideoSource, cfg: SamplerConfig) -> list[Clip]:
    """Sliding-window clips of ``cfg.clip_len`` frames, resized to ``cfg.resize_to``."""
    frames = _resized(video, cfg.resize_to)
    return [Clip(video.id, s, np.ascontiguousarray(_clip_frames(frames, s, cfg.clip_len)))
            for s in clip_starts(video.frame_count, cfg.clip_len, cfg.overlap)]


def temporal_jitter_sample(video: VideoSource, clip_len: int, rng: Rng,
                           resize_to: tuple[int, int] | None = None) -> Clip:
    """One clip with a uniformly random start in ``[0, F_padded - clip_len]``."""
    last = padded_frame_count(video.frame_count, clip_len) - clip_len
    start = int(rng.integers(0, last + 1))
    window = _clip_frames(video.frames, start, clip_len)
    if resize_to is not None:
        window = resize_bilinear(window, *resize_to)
    return Clip(video.id, start, np.ascontiguousarray(window))


# ------------------------------------------------------------ augmentation


def center_origin(size: tuple[int, int], crop: tuple[int, int]) -> tuple[int, int]:
    return ((size[0] - crop[0]) // 2, (size[1] - crop[1]) // 2)


def crop_clip(clip: Clip, top: int, left: int, height: int, width: int) -> Clip:
    h, w = clip.data.shape[-2:]
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise GeometryError(f"crop {height}x{width}@({top},{left}) outside {h}x{w} frame")
    data = clip.data[..., top:top + height, left:left + width]
    return Clip(clip.video_id, clip.start_frame, np.ascontiguousarray(data))


def hflip(clip: Clip) -> Clip:
    return Clip(clip.video_id, clip.start_frame, np.ascontiguousarray(clip.data[..., ::-1]))


def augment(clip: Clip, cfg: SamplerConfig, rng: Rng | None = None) -> Clip:
    """Random crop and horizontal flip (``cfg.flip_prob``) in train mode; centre crop otherwise."""
    h, w = clip.data.shape[-2:]
    ch, cw = cfg.crop
    if ch > h or cw > w:
        raise GeometryError(f"crop {ch}x{cw} larger than frame {h}x{w}")
    if not cfg.train_mode:
        top, left = center_origin((h, w), (ch, cw))
        return _subtract_mean(crop_clip(clip, top, left, ch, cw), cfg.mean)
    if rng is None:
        raise ConfigError("train-mode augmentation needs an rng")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    out = crop_clip(clip, top, left, ch, cw)
    if rng.random() < cfg.flip_prob:
        out = hflip(out)
    return _subtract_mean(out, cfg.mean)


def _subtract_mean(clip: Clip, mean: tuple[float, float, float] | None) -> Clip:
    if mean is None:
        return clip
    offset = np.asarray(mean, dtype=DTYPE).reshape(3, 1, 1, 1)
    return Clip(clip.video_id, clip.start_frame, clip.data - offset)


def shuffle_frames(clip: Clip, rng: Rng) -> Clip:
    """Permute the frames of a clip independently of everything else."""
    perm = rng.permutation(clip.data.shape[1])
    return Clip(clip.video_id, clip.start_frame, np.ascontiguousarray(clip.data[:, perm]))


def epoch_order(num_videos: int, clips_per_video: int, rng: Rng) -> np.ndarray:
    """Shuffled video indices for one epoch, each video repeated ``clips_per_video`` times."""
    order = np.repeat(np.arange(num_videos), clips_per_video)
    return order[rng.permutation(order.size)]


# --------------------------------------------------------------- ingestion

_DIGITS = re.compile(r"(\d+)")


def _natural_key(path: Path):
    return [int(p) if p.isdigit() else p for p in _DIGITS.split(path.name)]


def read_frame_dir(path: str | Path) -> np.ndarray:
    """Numbered PPM (P6) / PGM (P5) frames, 8-bit, scaled to [0, 1]."""
    path = Path(path)
    files = sorted((p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm")),
                   key=_natural_key)
    if not files:
        raise FormatError(f"no .ppm/.pgm frames in {path}")
    frames = []
    for f in files:
        with Image.open(f) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        frames.append(arr.transpose(2, 0, 1))
    shapes = {fr.shape for fr in frames}
    if len(shapes) != 1:
        raise ShapeError(f"frames in {path} have differing sizes {sorted(shapes)}")
    return np.stack(frames).astype(DTYPE)


def write_frame_dir(path: str | Path, frames: np.ndarray) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(frames.shape[0])))
    for i, frame in enumerate(frames):
        rgb = np.clip(np.rint(frame.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(path / f"{i:0{width}d}.ppm")


def read_video(path: str | Path, video_id: str, label: int | None = None) -> VideoSource:
    path = Path(path)
    if path.is_dir():
        frames = read_frame_dir(path)
    else:
        frames = load_tensor(path)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"{path}: expected an F x 3 x H x W tensor, got {frames.shape}")
    return VideoSource(video_id, frames, label)


def write_video(path: str | Path, video: VideoSource) -> None:
    path = Path(path)
    if path.suffix == ".stt":
        save_tensor(path, video.frames)
    else:
        write_frame_dir(path, video.frames)


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    path: Path
    label: int
    frames: int


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """``video_id,path,label,frames`` CSV; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise FormatError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        entries = []
        for row in reader:
            p = Path(row["path"])
            try:
                entries.append(ManifestEntry(row["video_id"], p if p.is_absolute() else base / p,
                                             int(row["label"]), int(row["frames"])))
            except ValueError as exc:
                raise FormatError(f"{path}: bad row {row}: {exc}") from exc
    return entries


def manifest_text(entries: Sequence[ManifestEntry], base: Path | None = None) -> str:
    lines = [",".join(MANIFEST_FIELDS)]
    for e in entries:
        p = e.path
        if base is not None:
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
        lines.append(f"{e.video_id},{p.as_posix()},{e.label},{e.frames}")
    return "\n".join(lines) + "\n"


def load_videos(entries: Sequence[ManifestEntry]) -> list[VideoSource]:
    return [read_video(e.path, e.video_id, e.label) for e in entries]
