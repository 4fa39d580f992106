"""``st-conv`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
configuration.  Failures print one line ``error: <code>: <message>`` to
stderr.  Every file artifact is written atomically.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classify, evaluation, parallel
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, GeometryError, InvalidRangeError, StConvError
from .layers import instantiate
from .netspec import build_net, conv2p1d_spec, conv3d_spec, manifest
from .optim import SgdConfig
from .tensor import DTYPE, atomic_write_bytes, load_tensor, new_rng, save_tensor
from .video import SamplerConfig, load_videos, read_manifest

log = logging.getLogger("stconv")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        raise UsageError(message)


def _hw(text: str) -> tuple[int, int] | None:
    if text.lower() == "none":
        return None
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("extents must be positive")
    return h, w


def _shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxBx..., got {text!r}") from None
    return dims


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (fallback: STCONV_THREADS, then 1)")
    p.add_argument("--config", type=Path, default=None, help="key=value defaults file")
    p.add_argument("--log-level", default="WARNING")


def _add_sampler(p: argparse.ArgumentParser, clip_len=8, overlap=4, resize="none", crop="28x28"):
    p.add_argument("--clip-len", type=int, default=clip_len)
    p.add_argument("--overlap", type=int, default=overlap)
    p.add_argument("--resize", type=_hw, default=_hw(resize), help="HxW or none")
    p.add_argument("--crop", type=_hw, default=_hw(crop))
    p.add_argument("--flip-prob", type=float, default=0.5)


def _add_trainer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--decay-interval", type=int, default=2, help="epochs between decays")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--clips-per-video", type=int, default=4)
    p.add_argument("--shuffle-frames", action="store_true",
                   help="permute frames inside every clip (temporal-signal control)")


NETS = ("c3d", "r2p1d34", "tiny-r2p1d")


def build_parser() -> _Parser:
    parser = _Parser(prog="st-conv", description="Spatiotemporal CNN video classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write the synthetic motion-direction dataset")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--videos", type=int, default=40, help="videos per class")
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--size", type=_hw, default=(32, 32))
    p.add_argument("--square", type=int, default=8)
    p.add_argument("--speed", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--format", choices=("stt", "ppm"), default="stt")

    p = sub.add_parser("describe", help="print a network manifest")
    _add_common(p)
    p.add_argument("--net", choices=NETS, required=True)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("finetune", help="train a network with the softmax head")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--net", choices=NETS, default="tiny-r2p1d")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--init", type=Path, default=None, help="STM1 weights to start from")
    p.add_argument("--out", type=Path, required=True, help="STM1 model file")
    p.add_argument("--loss-log", type=Path, default=None)
    _add_sampler(p)
    _add_trainer(p)

    p = sub.add_parser("extract", help="per-video L2-normalized feature descriptors")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--net", choices=NETS, default="c3d")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--model", type=Path, default=None, help="STM1 weights (seeded init if absent)")
    p.add_argument("--out", type=Path, required=True, help="STT1 descriptor matrix")
    _add_sampler(p, clip_len=16, overlap=8, resize="128x171", crop="112x112")

    p = sub.add_parser("train-svm", help="train the linear SVM on descriptors")
    _add_common(p)
    p.add_argument("--descriptors", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--svm-epochs", type=int, default=200)

    p = sub.add_parser("predict", help="video-level predictions (SVM or softmax)")
    _add_common(p)
    p.add_argument("--svm", type=Path, default=None)
    p.add_argument("--descriptors", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--net", choices=NETS, default="tiny-r2p1d")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_sampler(p)

    p = sub.add_parser("eval", help="k-fold cross-validation")
    _add_common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--net", choices=NETS, default="tiny-r2p1d")
    p.add_argument("--head", choices=("softmax", "svm"), default="softmax")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--fold-file", type=Path, default=None)
    p.add_argument("--model", type=Path, default=None, help="initial STM1 weights")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--svm-epochs", type=int, default=200)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    _add_sampler(p)
    _add_trainer(p)

    p = sub.add_parser("project", help="2-D PCA or t-SNE embedding of descriptors")
    _add_common(p)
    p.add_argument("--descriptors", type=Path, required=True)
    p.add_argument("--method", choices=("pca", "tsne"), default="pca")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--out-dir", type=Path, default=Path("."))

    p = sub.add_parser("bench", help="time a network or a single conv layer")
    _add_common(p)
    p.add_argument("--net", choices=NETS, default=None)
    p.add_argument("--layer", choices=("conv3d", "conv2p1d", "both"), default="both")
    p.add_argument("--channels", type=_shape, default=(64, 64), help="IN x OUT")
    p.add_argument("--kernel", type=_shape, default=(3, 3, 3), help="T x D x D")
    p.add_argument("--input", type=_shape, default=(1, 64, 8, 28, 28), help="N x C x T x H x W")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--out", type=Path, default=Path("bench.csv"))
    return parser


# ------------------------------------------------------------------ helpers


def _read_config(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    values = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _config_argv(values: dict[str, str], parser: argparse.ArgumentParser,
                 explicit: set[str]) -> list[str]:
    """Turn config entries into flags for every option not given on the command line."""
    dests = {a.dest: a for a in parser._actions if a.option_strings}
    argv = []
    for key, value in values.items():
        if key not in dests:
            raise ConfigError(f"unknown config key {key!r}")
        if key in explicit or key == "config":
            continue
        action = dests[key]
        flag = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(flag)
        else:
            argv += [flag, value]
    return argv


def _require_file(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not path.exists():
        raise ConfigError(f"{what} {path} does not exist")
    return path


def _require_parent(path: Path) -> Path:
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise ConfigError(f"output directory {parent} does not exist")
    return path


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(args.clip_len, args.overlap, args.resize, args.crop,
                         flip_prob=args.flip_prob)


def _build_net(name: str, classes: int, frames: int | None, crop: int | None):
    try:
        return build_net(name, classes, frames, crop)
    except GeometryError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _net(args):
    return _build_net(args.net, args.classes, args.clip_len, args.crop[0])


def _load_weights(net, path: Path | None) -> None:
    if path is not None:
        net.load_state_dict(load_checkpoint(_require_file(path, "model")), strict=False)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".csv")


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_descriptors(path: Path) -> tuple[np.ndarray, list[str], list[int]]:
    matrix = load_tensor(_require_file(path, "descriptors"))
    side = _require_file(_sidecar(path), "descriptor sidecar")
    with open(side, newline="", encoding="utf-8") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["row"]))
    if matrix.ndim != 2 or len(rows) != matrix.shape[0]:
        raise ConfigError(f"{side} does not match descriptor matrix {matrix.shape}")
    return matrix, [r["video_id"] for r in rows], [int(r["label"]) for r in rows]


# ------------------------------------------------------------- subcommands


def cmd_gen_synth(args) -> None:
    spec = evaluation.SyntheticSpec(args.videos, args.frames, args.size[0], args.size[1],
                                    args.square, args.speed, args.noise, args.seed)
    path = evaluation.write_synthetic(spec, args.out, args.format)
    print(path)


def cmd_describe(args) -> None:
    text = manifest(_build_net(args.net, args.classes, args.frames, args.crop))
    if args.out is not None:
        _write_text(_require_parent(args.out), text)
    sys.stdout.write(text)


def cmd_finetune(args) -> None:
    videos = load_videos(read_manifest(_require_file(args.manifest, "manifest")))
    _require_parent(args.out)
    net = instantiate(_net(args), new_rng(args.seed, 1))
    _load_weights(net, args.init)
    sgd = SgdConfig(args.lr, args.decay_factor, args.decay_interval, args.momentum,
                    args.batch_size, "epoch")

    def on_step(r: classify.LossRecord) -> None:
        log.info("epoch %d iter %d loss %.6f lr %.3g", r.epoch, r.iteration, r.loss, r.lr)

    _, trace = classify.finetune(net, videos, sgd, args.epochs, new_rng(args.seed, 2),
                                 _sampler(args), args.clips_per_video, args.shuffle_frames,
                                 on_step)
    save_checkpoint(args.out, net.state_dict())
    if args.loss_log is not None:
        lines = ["epoch,iteration,loss,lr"] + [f"{r.epoch},{r.iteration},{r.loss!r},{r.lr!r}"
                                               for r in trace]
        _write_text(_require_parent(args.loss_log), "\n".join(lines) + "\n")


def cmd_extract(args) -> None:
    entries = read_manifest(_require_file(args.manifest, "manifest"))
    _require_parent(args.out)
    net = instantiate(_net(args), new_rng(args.seed, 1))
    _load_weights(net, args.model)
    cfg = _sampler(args)
    rows, side = [], ["video_id,label,row"]
    for i, video in enumerate(load_videos(entries)):
        rows.append(classify.video_descriptor(net, video, cfg).vector)
        side.append(f"{video.id},{video.label},{i}")
    save_tensor(args.out, np.stack(rows))
    _write_text(_sidecar(args.out), "\n".join(side) + "\n")


def cmd_train_svm(args) -> None:
    X, _, labels = _read_descriptors(args.descriptors)
    _require_parent(args.out)
    y = np.where(np.asarray(labels) == 1, 1, -1)
    model = classify.svm_train(X, y, args.l2, args.svm_epochs, new_rng(args.seed, 4))
    save_checkpoint(args.out, classify.svm_to_entries(model))


def cmd_predict(args) -> None:
    _require_parent(args.out)
    lines = ["video_id,label,predicted,score"]
    if args.svm is not None:
        model = classify.svm_from_entries(load_checkpoint(_require_file(args.svm, "svm")))
        X, ids, labels = _read_descriptors(_require_file(args.descriptors, "descriptors"))
        for vid, label, x in zip(ids, labels, X):
            sign, score = classify.svm_predict(model, x)
            lines.append(f"{vid},{label},{1 if sign > 0 else 0},{score!r}")
    else:
        videos = load_videos(read_manifest(_require_file(args.manifest, "manifest")))
        net = instantiate(_net(args), new_rng(args.seed, 1))
        _load_weights(net, _require_file(args.model, "model"))
        for v in videos:
            cls, probs = classify.predict_video(net, v, _sampler(args))
            lines.append(f"{v.id},{v.label},{cls},{float(probs[cls])!r}")
    _write_text(args.out, "\n".join(lines) + "\n")


def cmd_eval(args) -> None:
    videos = load_videos(read_manifest(_require_file(args.manifest, "manifest")))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    weights = load_checkpoint(_require_file(args.model, "model")) if args.model else None
    cfg = evaluation.PipelineConfig(
        net=args.net, head=args.head, num_classes=args.classes, clip_len=args.clip_len,
        overlap=args.overlap, resize=args.resize, crop=args.crop, flip_prob=args.flip_prob,
        learning_rate=args.lr, decay_factor=args.decay_factor,
        decay_interval=args.decay_interval, momentum=args.momentum, batch_size=args.batch_size,
        epochs=args.epochs, clips_per_video=args.clips_per_video,
        shuffle_frames=args.shuffle_frames, svm_l2=args.l2, svm_epochs=args.svm_epochs,
        weights=weights)
    folds = None
    if args.fold_file is not None:
        folds = evaluation.read_fold_file(_require_file(args.fold_file, "fold-file"),
                                          [v.id for v in videos])
    summary = evaluation.evaluate_cv(cfg, videos, args.k, args.seed, folds)
    _write_text(args.out_dir / "report.csv", evaluation.report_csv(summary))
    _write_text(args.out_dir / "predictions.csv", evaluation.predictions_csv(summary))
    _write_text(args.out_dir / "summary.txt", evaluation.format_summary(summary))
    sys.stdout.write(evaluation.format_summary(summary))


def cmd_project(args) -> None:
    X, ids, labels = _read_descriptors(args.descriptors)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    if args.method == "pca":
        result = evaluation.project_pca(X, 2)
        points = result.projection
        title = "PCA (explained " + ", ".join(f"{r:.3f}" for r in result.explained_variance_ratio) + ")"
    else:
        points = evaluation.project_tsne(X, args.perplexity, args.iters, args.seed)
        title = f"t-SNE (perplexity {args.perplexity:g})"
    _write_text(args.out_dir / "embedding.csv", evaluation.embedding_csv(points, labels, ids))
    _write_text(args.out_dir / "embedding.svg", evaluation.embedding_svg(points, labels, title=title))


def cmd_bench(args) -> None:
    _require_parent(args.out)
    shape = args.input
    if len(shape) != 5:
        raise ConfigError("--input must be N x C x T x H x W")
    rows = []
    if args.net is not None:
        net = _build_net(args.net, 2, shape[2], shape[3])
        rows.append(evaluation.benchmark_conv(net, shape, args.repetitions, args.seed))
    else:
        if len(args.channels) != 2 or len(args.kernel) != 3:
            raise ConfigError("--channels is IN x OUT and --kernel is T x D x D")
        n_in, n_out = args.channels
        if shape[1] != n_in:
            raise ConfigError(f"--input has {shape[1]} channels but --channels says {n_in}")
        kinds = ("conv3d", "conv2p1d") if args.layer == "both" else (args.layer,)
        for kind in kinds:
            make = conv3d_spec if kind == "conv3d" else conv2p1d_spec
            spec = make(kind, n_in, n_out, args.kernel, 1, bias=False)
            rows.append(evaluation.benchmark_conv(spec, shape, args.repetitions, args.seed))
    text = evaluation.bench_csv(rows)
    _write_text(args.out, text)
    sys.stdout.write(text)


COMMANDS = {
    "gen-synth": cmd_gen_synth, "describe": cmd_describe, "finetune": cmd_finetune,
    "extract": cmd_extract, "train-svm": cmd_train_svm, "predict": cmd_predict,
    "eval": cmd_eval, "project": cmd_project, "bench": cmd_bench,
}


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
        explicit = {a.dest for a in sub._actions if a.option_strings
                    and any(s in argv or any(x.startswith(s + "=") for x in argv)
                            for s in a.option_strings)}
        extra = _config_argv(_read_config(args.config), sub, explicit)
        args = parser.parse_args([argv[0]] + extra + list(argv[1:]))
    return args


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("STCONV_THREADS", "1") or 1)
    try:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        with parallel.threads(threads):
            COMMANDS[args.command](args)
    except (ConfigError, InvalidRangeError) as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StConvError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        parallel.shutdown()
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
