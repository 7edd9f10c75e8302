"""Command-line surface: gen, train, infer, eval, bench.

Configs are flat `key = value` text with a strict typed schema (unknown keys
rejected); every command echoes its fully resolved config into the output
directory, and equal configs + seeds produce byte-identical outputs when
single-threaded. Exit codes: 0 success, 2 config error, 3 I/O error,
4 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import backend, harness, network
from .core import Rng, read_cloud, validate_cloud, write_cloud
from .errors import ConfigInvalidError, EngineError, IoFailureError
from .harness import ToyTask

EXIT_CODES = {
    "ConfigInvalid": 2,
    "ShapeMismatch": 2,
    "IndexOutOfRange": 2,
    "EmptyInput": 2,
    "IoFailure": 3,
    "NonFinite": 4,
}

TASKS = ("prewitt_x", "prewitt_y", "blur", "seg_synth", "cls_toy")


@dataclass
class RunConfig:
    task: str = ""
    stages: int = 2
    base_channels: int = 8
    k: int = 8
    factor: int = 4
    leaf_size: int = 16
    lr: float = 3e-3
    steps: int = 500
    batch: int = 1
    seed: int = 0
    threads: int = 1
    dataset: str = ""
    checkpoint: str = ""
    out: str = "out"
    n_points: int = 4096
    n_scenes: int = 8
    n_classes: int = 3
    image_size: int = 16
    n_samples: int = 4
    eval_every: int = 100
    target_miou: float = 0.0
    holdout: float = 0.2
    input: str = ""
    pred: str = ""
    truth: str = ""
    bench_sizes: str = "100000,200000,400000,800000"
    bench_channels: int = 16
    bench_reps: int = 3


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(path) -> RunConfig:
    """Parse the flat key-value format; '#' starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoFailureError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig()
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalidError(f"{path}:{ln}: expected 'key = value', got {raw.rstrip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigInvalidError(f"{path}:{ln}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        try:
            if kind in (int, "int"):
                parsed = int(value)
            elif kind in (float, "float"):
                parsed = float(value)
            else:
                parsed = value
        except ValueError as exc:
            raise ConfigInvalidError(f"{path}:{ln}: bad value for {key!r}: {value!r}") from exc
        setattr(cfg, key, parsed)
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.txt", "w", newline="\n") as fh:
            fh.write(format_config(cfg))
    except OSError as exc:
        raise IoFailureError(f"cannot prepare output directory {out}: {exc}") from exc
    return out


def _write_text(path, text):
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def _fmt(v) -> str:
    """Shortest round-trip decimal for CSV cells (plain float repr)."""
    return repr(float(v))


def _require_task(cfg: RunConfig):
    if cfg.task not in TASKS:
        raise ConfigInvalidError(f"task must be one of {TASKS}, got {cfg.task!r}")


def _dataset_dir(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise IoFailureError("config has no dataset path")
    path = Path(cfg.dataset)
    if not path.is_dir():
        raise IoFailureError(f"dataset directory {path} does not exist")
    return path


# --- gen -----------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> int:
    _require_task(cfg)
    out = _prepare_out(cfg)
    rng = Rng(cfg.seed)
    if cfg.task == "seg_synth":
        scenes = harness.gen_synthetic_seg(cfg.n_points, cfg.n_scenes, rng, cfg.n_classes)
        for i, sc in enumerate(scenes):
            write_cloud(out / f"scene_{i:04d}.cloud", sc.cloud, sc.labels)
        print(f"wrote {len(scenes)} scenes ({cfg.n_points} points each) to {out}")
    elif cfg.task == "cls_toy":
        clouds, labels = harness.gen_two_class_clouds(cfg.n_points, cfg.n_scenes, rng)
        for i, (cloud, label) in enumerate(zip(clouds, labels)):
            write_cloud(out / f"cloud_{i:04d}.cloud", cloud,
                        np.full(cloud.n, label, dtype=np.int64))
        print(f"wrote {len(clouds)} labeled clouds to {out}")
    else:
        task = ToyTask(cfg.task, cfg.image_size, cfg.n_samples, cfg.seed)
        feats, targets = harness.toy_task_data(task)
        h = w = cfg.image_size
        grid = np.stack([np.repeat(np.arange(h, dtype=np.float64), w),
                         np.tile(np.arange(w, dtype=np.float64), h)], axis=1)
        inner = harness.interior_indices(h, w)
        from .core import PointCloud

        for i, (f, t) in enumerate(zip(feats, targets)):
            write_cloud(out / f"sample_{i:03d}_input.cloud", PointCloud(grid, f))
            write_cloud(out / f"sample_{i:03d}_target.cloud",
                        PointCloud(grid[inner], t.reshape(-1, 1)))
        print(f"wrote {len(feats)} {cfg.task} samples ({h}x{w}) to {out}")
    return 0


# --- train ---------------------------------------------------------------------


def _loss_logger(rows):
    def log(step, loss):
        rows.append(f"{step},{loss!r}")
    return log


def _train_toy(cfg: RunConfig, out: Path) -> int:
    data_dir = _dataset_dir(cfg)
    inputs, targets = [], []
    for i in range(cfg.n_samples):
        in_path = data_dir / f"sample_{i:03d}_input.cloud"
        tg_path = data_dir / f"sample_{i:03d}_target.cloud"
        if not in_path.exists() or not tg_path.exists():
            raise IoFailureError(f"missing toy sample files for index {i} in {data_dir}")
        cloud, _ = read_cloud(in_path)
        target, _ = read_cloud(tg_path)
        inputs.append(cloud.features)
        targets.append(target.features[:, 0])
    rows = ["step,loss"]
    result = harness.train_flex_filter(inputs, targets, cfg.image_size, cfg.image_size,
                                       cfg.steps, cfg.lr, Rng(cfg.seed), cfg.threads,
                                       log=_loss_logger(rows))
    _write_text(out / "loss.csv", "\n".join(rows) + "\n")
    _write_text(out / "metrics.csv", "metric,class,value\n"
                f"mse,,{_fmt(result.final_mse)}\n"
                f"theta_row,,{_fmt(result.theta[0])}\n"
                f"theta_col,,{_fmt(result.theta[1])}\n"
                f"theta_b,,{_fmt(result.theta_b)}\n")
    params = np.concatenate([result.theta, [result.theta_b]])
    network.save_checkpoint(out / "model.ckpt",
                            {"kind": "toy", "task": cfg.task, "image_size": cfg.image_size},
                            params)
    print(f"final mse {result.final_mse:.3e} after {cfg.steps} steps")
    return 0


def _load_scenes(cfg: RunConfig, pattern: str):
    data_dir = _dataset_dir(cfg)
    paths = sorted(data_dir.glob(pattern))
    if not paths:
        raise IoFailureError(f"no {pattern} files in {data_dir}")
    out = []
    for p in paths:
        cloud, labels = read_cloud(p)
        if labels is None:
            raise ConfigInvalidError(f"{p}: expected a labeled cloud")
        out.append((cloud, labels))
    return out


def _graph_cfg_dict(cfg: RunConfig, kind: str) -> dict:
    return {
        "kind": kind, "d": 3, "n_f": 1, "n_out": cfg.n_classes if kind == "segmentation" else 2,
        "stages": cfg.stages, "base_channels": cfg.base_channels,
        "k": cfg.k, "factor": cfg.factor,
    }


def _train_seg(cfg: RunConfig, out: Path) -> int:
    scenes = _load_scenes(cfg, "scene_*.cloud")
    rng = Rng(cfg.seed)
    prepared = [
        harness.prepare_scene(cloud, labels, cfg.stages, cfg.k, cfg.factor,
                              rng.spawn(1000 + i), "idiss", cfg.threads, cfg.leaf_size)
        for i, (cloud, labels) in enumerate(scenes)
    ]
    n_hold = max(1, int(round(cfg.holdout * len(prepared)))) if len(prepared) > 1 else 0
    train, heldout = prepared[: len(prepared) - n_hold], prepared[len(prepared) - n_hold:]
    graph = network.build_segnet(3, 1, cfg.n_classes, cfg.stages, cfg.base_channels,
                                 cfg.k, cfg.factor)
    network.initialize_params(graph, rng.spawn(1), train[0].hierarchy)
    adam = network.init_adam(graph.store.size, lr=cfg.lr)
    rows = ["step,loss"]
    result = harness.train_segmentation(
        graph, adam, train, heldout, cfg.steps, cfg.batch, cfg.eval_every,
        cfg.target_miou if cfg.target_miou > 0 else None, cfg.threads,
        log=_loss_logger(rows))
    _write_text(out / "loss.csv", "\n".join(rows) + "\n")
    train_m = harness._eval_segmentation(graph, train, cfg.threads)
    lines = ["metric,class,value",
             f"train_accuracy,,{_fmt(train_m.accuracy)}",
             f"train_miou,,{_fmt(train_m.miou)}",
             f"heldout_accuracy,,{_fmt(result.final.accuracy)}",
             f"heldout_miou,,{_fmt(result.final.miou)}"]
    for c, v in enumerate(result.final.iou):
        lines.append(f"heldout_iou,{c},{_fmt(v)}")
    _write_text(out / "metrics.csv", "\n".join(lines) + "\n")
    network.save_checkpoint(out / "model.ckpt", graph.config(), graph.params, adam)
    print(f"trained {result.steps_run} steps; heldout mIoU {result.final.miou:.4f}, "
          f"train accuracy {train_m.accuracy:.4f}")
    return 0


def _train_cls(cfg: RunConfig, out: Path) -> int:
    data = _load_scenes(cfg, "cloud_*.cloud")
    rng = Rng(cfg.seed)
    prepared, labels = [], []
    for i, (cloud, point_labels) in enumerate(data):
        prepared.append(harness.prepare_scene(cloud, point_labels, cfg.stages, cfg.k,
                                              cfg.factor, rng.spawn(2000 + i), "idiss",
                                              cfg.threads, cfg.leaf_size))
        labels.append(int(point_labels[0]))
    graph = network.build_classifier(3, 1, 2, cfg.stages, cfg.base_channels, cfg.k, cfg.factor)
    network.initialize_params(graph, rng.spawn(1), prepared[0].hierarchy)
    adam = network.init_adam(graph.store.size, lr=cfg.lr)
    rows = ["step,loss"]
    result = harness.train_classifier(graph, adam, prepared, labels, cfg.steps,
                                      cfg.threads, log=_loss_logger(rows))
    _write_text(out / "loss.csv", "\n".join(rows) + "\n")
    _write_text(out / "metrics.csv", "metric,class,value\n"
                f"train_accuracy,,{_fmt(result.final.accuracy)}\n")
    network.save_checkpoint(out / "model.ckpt", graph.config(), graph.params, adam)
    print(f"train accuracy {result.final.accuracy:.4f} after {cfg.steps} steps")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require_task(cfg)
    out = _prepare_out(cfg)
    if cfg.task in ("prewitt_x", "prewitt_y", "blur"):
        return _train_toy(cfg, out)
    if cfg.task == "seg_synth":
        return _train_seg(cfg, out)
    return _train_cls(cfg, out)


# --- infer ---------------------------------------------------------------------


def cmd_infer(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    if not cfg.checkpoint:
        raise ConfigInvalidError("infer requires a checkpoint path in the config")
    if not cfg.input:
        raise ConfigInvalidError("infer requires an input cloud path in the config")
    ck_config, params, _ = network.load_checkpoint(cfg.checkpoint)
    if ck_config.get("kind") not in ("segmentation", "classification"):
        raise ConfigInvalidError("checkpoint does not hold a network model")
    expected = _graph_cfg_dict(cfg, ck_config["kind"])
    if ck_config != expected:
        raise ConfigInvalidError(
            f"checkpoint/config mismatch: checkpoint {ck_config}, config implies {expected}"
        )
    graph = (network.build_segnet if ck_config["kind"] == "segmentation"
             else network.build_classifier)(
        ck_config["d"], ck_config["n_f"], ck_config["n_out"], ck_config["stages"],
        ck_config["base_channels"], ck_config["k"], ck_config["factor"])
    if params.size != graph.store.size:
        raise ConfigInvalidError("checkpoint parameter count does not match the graph")
    graph.store.vec[...] = params
    cloud, truth = read_cloud(cfg.input)
    validate_cloud(cloud)
    t0 = time.perf_counter()
    prep = harness.prepare_scene(cloud, np.zeros(cloud.n, dtype=np.int64), cfg.stages,
                                 cfg.k, cfg.factor, Rng(cfg.seed), "idiss", cfg.threads,
                                 cfg.leaf_size)
    t_prep = time.perf_counter() - t0
    t0 = time.perf_counter()
    logits = graph.forward(prep.hierarchy, cloud.features, cfg.threads)
    t_fwd = time.perf_counter() - t0
    graph._tape = None
    graph._run = None
    if ck_config["kind"] == "segmentation":
        pred = logits.argmax(axis=1).astype(np.int64)
    else:
        pred = np.full(cloud.n, int(logits.argmax()), dtype=np.int64)
    write_cloud(out / "predictions.cloud", cloud, pred)
    print(f"inference: {cloud.n} points, hierarchy {t_prep:.3f}s, forward {t_fwd:.3f}s")
    if truth is not None:
        m = harness.metrics_from_predictions(pred, truth, int(logits.shape[1]))
        _write_text(out / "metrics.csv", harness.metrics_csv(m))
        print(f"accuracy vs provided labels: {m.accuracy:.4f} (mIoU {m.miou:.4f})")
    return 0


# --- eval ----------------------------------------------------------------------


def cmd_eval(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    if not cfg.pred or not cfg.truth:
        raise ConfigInvalidError("eval requires pred and truth cloud paths in the config")
    _, pred = read_cloud(cfg.pred)
    _, truth = read_cloud(cfg.truth)
    if pred is None or truth is None:
        raise ConfigInvalidError("eval inputs must be labeled clouds")
    m = harness.metrics_from_predictions(pred, truth, cfg.n_classes)
    _write_text(out / "metrics.csv", harness.metrics_csv(m))
    print(f"accuracy {m.accuracy:.4f}, mIoU {m.miou:.4f}")
    return 0


# --- bench ---------------------------------------------------------------------


def cmd_bench(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    try:
        sizes = [int(tok) for tok in cfg.bench_sizes.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigInvalidError(f"bad bench_sizes {cfg.bench_sizes!r}") from exc
    rows = harness.bench_scaling(sizes, cfg.k, cfg.bench_channels, cfg.bench_reps,
                                 Rng(cfg.seed), cfg.threads, include_naive=True)
    _write_text(out / "bench.csv", harness.bench_csv(rows))
    if len(rows) >= 2:
        _write_text(out / "scaling.svg", harness.scaling_svg(rows))
    print(harness.BENCH_CSV_HEADER)
    for r in rows:
        print(f"{r.n},{r.k},{r.channels},{r.reps},{r.forward_s:.6f},"
              f"{r.backward_s:.6f},{r.naive_forward_s:.6f},{r.memory_bytes},{r.threads}")
    print(f"[backend: {backend.backend_name()}]")
    return 0


# --- entry point -----------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flexconv",
        description="Point-cloud convolution engine: dataset generation, training, "
                    "inference, evaluation and kernel benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("gen", cmd_gen), ("train", cmd_train), ("infer", cmd_infer),
                     ("eval", cmd_eval), ("bench", cmd_bench)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="override the thread count")
        p.add_argument("--out", default=None, help="override the output directory")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.out is not None:
            cfg.out = args.out
        if cfg.threads < 1:
            raise ConfigInvalidError(f"threads must be >= 1, got {cfg.threads}")
        return args.fn(cfg)
    except EngineError as exc:
        print(f"error [{exc.kind}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.kind, 2)


if __name__ == "__main__":
    sys.exit(main())
