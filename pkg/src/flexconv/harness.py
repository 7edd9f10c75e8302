"""Reference oracles, toy datasets, metrics, benchmarks, and training loops.

The dense-grid convolution oracle pins the offset convention: its tap index
tau matches the flex offset l_i - l_j, i.e. out(l) = sum_tau K(tau) f(l - tau)
(true convolution, not correlation). The ramp-image test asserts the sign this
implies once and for all.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import backend, flexops
from .core import DenseImage, PointCloud, Rng, image_to_cloud
from .errors import ConfigInvalidError, IndexOutOfRangeError, ShapeMismatchError
from .flexops import FlexConvParams
from .neighborhood import NeighborIndex, build_kdtree, knn_query
from .network import (
    AdamState,
    LayerGraph,
    adam_step,
    init_adam,
    softmax_cross_entropy,
)
from .sampling import ResolutionHierarchy, build_hierarchy


# --- dense-grid convolution oracle -------------------------------------------


@dataclass
class DenseConvOracle:
    """k_h x k_w x C x C' filter bank with odd spatial dims."""

    kernel: np.ndarray

    def __post_init__(self):
        self.kernel = np.ascontiguousarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 4:
            raise ShapeMismatchError("kernel must be k_h x k_w x C x C'")
        if self.kernel.shape[0] % 2 == 0 or self.kernel.shape[1] % 2 == 0:
            raise ShapeMismatchError("kernel dims must be odd")
        if not np.isfinite(self.kernel).all():
            raise ShapeMismatchError("kernel must be finite")


def dense_conv2d(img: DenseImage, oracle: DenseConvOracle) -> np.ndarray:
    """Textbook discrete convolution, valid (interior) region only.

    out[y, x, c'] = sum_c sum_tau K[tau, c, c'] * img[(y, x) - tau]; tau runs
    over the kernel grid centered at zero. Returns the valid-region pixel
    array (which may be smaller than the 3x3 a DenseImage requires).
    """
    kh, kw, c_in, _ = oracle.kernel.shape
    if img.channels != c_in:
        raise ShapeMismatchError(f"kernel expects C={c_in}, image has C={img.channels}")
    if img.height < kh or img.width < kw:
        raise ShapeMismatchError("image smaller than kernel")
    ry, rx = kh // 2, kw // 2
    oh, ow = img.height - kh + 1, img.width - kw + 1
    out = np.zeros((oh, ow, oracle.kernel.shape[3]))
    for ty in range(-ry, ry + 1):
        for tx in range(-rx, rx + 1):
            patch = img.pixels[ry - ty:ry - ty + oh, rx - tx:rx - tx + ow]
            out += patch @ oracle.kernel[ty + ry, tx + rx]
    return out


def kernel_from_flex(theta, theta_b: float) -> DenseConvOracle:
    """3x3 single-channel kernel K(tau) = <theta, tau> + theta_b, tau in {-1,0,1}^2."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (2,):
        raise ShapeMismatchError(f"theta must be a 2-vector, got shape {theta.shape}")
    k = np.empty((3, 3, 1, 1))
    for ty in (-1, 0, 1):
        for tx in (-1, 0, 1):
            k[ty + 1, tx + 1, 0, 0] = theta[0] * ty + theta[1] * tx + theta_b
    return DenseConvOracle(k)


def grid_neighbors(height: int, width: int, num_threads: int = 1) -> NeighborIndex:
    """k=9 neighborhoods of the image-as-cloud; for interior pixels this is
    exactly the 3x3 stencil (self + 4 at distance 1 + 4 at distance sqrt(2))."""
    rows = np.repeat(np.arange(height, dtype=np.float64), width)
    cols = np.tile(np.arange(width, dtype=np.float64), height)
    locs = np.stack([rows, cols], axis=1)
    tree = build_kdtree(locs)
    return knn_query(tree, tree.points, 9, num_threads)


def interior_indices(height: int, width: int) -> np.ndarray:
    """Raster indices of pixels with a full 3x3 neighborhood."""
    ys, xs = np.meshgrid(np.arange(1, height - 1), np.arange(1, width - 1), indexing="ij")
    return (ys * width + xs).ravel()


# --- toy tasks ----------------------------------------------------------------


TOY_KINDS = ("prewitt_x", "prewitt_y", "blur")


def toy_target_params(kind: str):
    """Analytic (theta, theta_b) whose flex kernel realizes the named operation.

    Locations are (row, col): prewitt_x responds to column offsets, prewitt_y
    to row offsets, blur is the 3x3 box mean.
    """
    if kind == "prewitt_x":
        return np.array([0.0, 1.0]), 0.0
    if kind == "prewitt_y":
        return np.array([1.0, 0.0]), 0.0
    if kind == "blur":
        return np.array([0.0, 0.0]), 1.0 / 9.0
    raise ConfigInvalidError(f"unknown toy task {kind!r}")


@dataclass
class ToyTask:
    """Seeded generator config for the single-filter regression tasks."""

    kind: str
    image_size: int = 64
    n_samples: int = 4
    seed: int = 0

    def sample_images(self) -> np.ndarray:
        rng = Rng(self.seed)
        return rng.gen.uniform(
            -1.0, 1.0, size=(self.n_samples, self.image_size, self.image_size, 1)
        )


@dataclass
class ToyRegressionResult:
    final_mse: float
    theta: np.ndarray
    theta_b: float
    losses: list[float] = field(default_factory=list)


def train_flex_filter(feature_sets, targets, height: int, width: int, steps: int,
                      lr: float, rng: Rng, num_threads: int = 1,
                      log=None) -> ToyRegressionResult:
    """Train one flex-conv filter (C=C'=1, k=9 grid neighborhoods) by MSE on
    (image features, interior target) pairs; raster grid geometry is implied."""
    nbr = grid_neighbors(height, width, num_threads)
    inner = interior_indices(height, width)
    locs = image_to_cloud(DenseImage(np.zeros((height, width, 1)))).locations
    for f, t in zip(feature_sets, targets):
        if f.shape != (height * width, 1) or t.shape != (inner.size,):
            raise ShapeMismatchError("toy sample shapes do not match the declared image size")

    params = np.concatenate([rng.gen.uniform(-0.1, 0.1, size=2),
                             rng.gen.uniform(-0.1, 0.1, size=1)])
    adam = init_adam(3, lr=lr)
    losses = []

    def forward(sample, p):
        fp = FlexConvParams(p[:2].reshape(1, 1, 2), p[2:].reshape(1, 1))
        return flexops.flex_conv_forward(feature_sets[sample], locs, nbr, fp, num_threads)

    for step in range(steps):
        sample = step % len(feature_sets)
        out = forward(sample, params)
        diff = out[inner, 0] - targets[sample]
        losses.append(float((diff ** 2).mean()))
        g = np.zeros_like(out)
        g[inner, 0] = 2.0 * diff / inner.size
        fp = FlexConvParams(params[:2].reshape(1, 1, 2), params[2:].reshape(1, 1))
        gb = flexops.flex_conv_backward(g, feature_sets[sample], locs, nbr, fp,
                                        with_locations=False)
        grads = np.concatenate([gb.d_theta.ravel(), gb.d_theta_b.ravel()])
        adam_step(adam, params, grads)
        if log is not None:
            log(step + 1, losses[-1])

    final = float(np.mean([
        ((forward(s, params)[inner, 0] - targets[s]) ** 2).mean()
        for s in range(len(feature_sets))
    ]))
    return ToyRegressionResult(final, params[:2].copy(), float(params[2]), losses)


def toy_task_data(task: ToyTask):
    """Materialize a toy task: per-sample (flat features, interior target)."""
    target_theta, target_b = toy_target_params(task.kind)
    oracle = kernel_from_flex(target_theta, target_b)
    images = task.sample_images()
    feats = [img.reshape(-1, 1) for img in images]
    targets = [dense_conv2d(DenseImage(img), oracle).reshape(-1) for img in images]
    return feats, targets


def run_toy_regression(task: ToyTask, steps: int, lr: float, rng: Rng,
                       num_threads: int = 1) -> ToyRegressionResult:
    """Generate the seeded task data and fit the single flex filter to it."""
    feats, targets = toy_task_data(task)
    return train_flex_filter(feats, targets, task.image_size, task.image_size,
                             steps, lr, rng, num_threads)


# --- synthetic segmentation scenes --------------------------------------------


PLANE, SPHERE, BOX = 0, 1, 2
SEG_CLASS_NAMES = ("plane", "sphere", "box")


@dataclass
class Scene:
    cloud: PointCloud
    labels: np.ndarray
    primitives: list[dict]
    point_primitive: np.ndarray  # index into primitives, per point


def _sample_plane(rng, n, z0):
    pts = np.empty((n, 3))
    pts[:, 0] = rng.uniform(0.0, 1.0, n)
    pts[:, 1] = rng.uniform(0.0, 1.0, n)
    pts[:, 2] = z0
    return pts


def _sample_sphere(rng, n, center, radius):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _sample_box(rng, n, center, half):
    """Uniform on the five visible faces (no bottom; boxes rest on the ground)."""
    hx, hy, hz = half
    areas = np.array([
        4 * hx * hy,          # top
        4 * hy * hz, 4 * hy * hz,  # +-x sides
        4 * hx * hz, 4 * hx * hz,  # +-y sides
    ])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, n)
    v = rng.uniform(-1.0, 1.0, n)
    pts = np.empty((n, 3))
    for f in range(5):
        sel = face == f
        if f == 0:
            pts[sel] = np.stack([u[sel] * hx, v[sel] * hy, np.full(sel.sum(), hz)], axis=1)
        elif f in (1, 2):
            sx = hx if f == 1 else -hx
            pts[sel] = np.stack([np.full(sel.sum(), sx), u[sel] * hy, v[sel] * hz], axis=1)
        else:
            sy = hy if f == 3 else -hy
            pts[sel] = np.stack([u[sel] * hx, np.full(sel.sum(), sy), v[sel] * hz], axis=1)
    return center + pts


def point_primitive_distance(points, prim: dict) -> np.ndarray:
    """Exact distance from points to the primitive surface (the assembly check)."""
    points = np.asarray(points, dtype=np.float64)
    if prim["kind"] == "plane":
        inside_x = np.clip(points[:, 0], 0.0, 1.0)
        inside_y = np.clip(points[:, 1], 0.0, 1.0)
        proj = np.stack([inside_x, inside_y, np.full(len(points), prim["z"])], axis=1)
        return np.linalg.norm(points - proj, axis=1)
    if prim["kind"] == "sphere":
        return np.abs(np.linalg.norm(points - np.asarray(prim["center"]), axis=1) - prim["radius"])
    if prim["kind"] == "box":
        rel = np.abs(points - np.asarray(prim["center"])) - np.asarray(prim["half"])
        outside = np.linalg.norm(np.maximum(rel, 0.0), axis=1)
        inside = np.minimum(rel.max(axis=1), 0.0)
        return np.abs(outside + inside)
    raise ConfigInvalidError(f"unknown primitive kind {prim['kind']!r}")


def gen_synthetic_seg(n_points: int, n_scenes: int, rng: Rng, n_classes: int = 3) -> list[Scene]:
    """Scenes of 3-5 primitives (one ground plane, 1-2 spheres, 1-2 boxes)
    with per-point class labels, class-balanced within 20%."""
    if n_scenes < 1 or n_points < 8:
        raise ConfigInvalidError(f"need n_scenes >= 1 and n_points >= 8, got {n_scenes}, {n_points}")
    if n_classes != 3:
        raise ConfigInvalidError("synthetic segmentation defines exactly 3 classes")
    scenes = []
    for s in range(n_scenes):
        g = rng.spawn(s).gen
        prims = []
        z0 = float(g.uniform(0.0, 0.02))
        prims.append({"kind": "plane", "z": z0, "cls": PLANE})
        for _ in range(int(g.integers(1, 3))):
            prims.append({
                "kind": "sphere",
                "center": g.uniform([0.2, 0.2, 0.45], [0.8, 0.8, 0.75]).tolist(),
                "radius": float(g.uniform(0.08, 0.18)),
                "cls": SPHERE,
            })
        for _ in range(int(g.integers(1, 3))):
            half = g.uniform(0.05, 0.12, size=3)
            cx, cy = g.uniform(0.15, 0.85, size=2)
            prims.append({
                "kind": "box",
                "center": [float(cx), float(cy), float(z0 + half[2])],
                "half": half.tolist(),
                "cls": BOX,
            })
        counts = np.full(3, n_points // 3)
        counts[: n_points - counts.sum()] += 1
        pts, labels, owner = [], [], []
        for cls in (PLANE, SPHERE, BOX):
            members = [i for i, p in enumerate(prims) if p["cls"] == cls]
            share = np.full(len(members), counts[cls] // len(members))
            share[: counts[cls] - share.sum()] += 1
            for idx, cnt in zip(members, share):
                p = prims[idx]
                if p["kind"] == "plane":
                    drawn = _sample_plane(g, cnt, p["z"])
                elif p["kind"] == "sphere":
                    drawn = _sample_sphere(g, cnt, np.asarray(p["center"]), p["radius"])
                else:
                    drawn = _sample_box(g, cnt, np.asarray(p["center"]), np.asarray(p["half"]))
                pts.append(drawn)
                labels.append(np.full(cnt, cls, dtype=np.int64))
                owner.append(np.full(cnt, idx, dtype=np.int64))
        pts = np.concatenate(pts)
        labels = np.concatenate(labels)
        owner = np.concatenate(owner)
        perm = g.permutation(n_points)
        cloud = PointCloud(pts[perm], np.ones((n_points, 1)))
        scenes.append(Scene(cloud, labels[perm], prims, owner[perm]))
    return scenes


def gen_two_class_clouds(n_points: int, n_samples: int, rng: Rng):
    """Separable classification toy set: spherical shells vs elongated sticks."""
    if n_samples < 2 or n_points < 8:
        raise ConfigInvalidError("need n_samples >= 2 and n_points >= 8")
    clouds, labels = [], []
    for s in range(n_samples):
        g = rng.spawn(s).gen
        label = s % 2
        if label == 0:
            pts = _sample_sphere(g, n_points, np.array([0.5, 0.5, 0.5]), float(g.uniform(0.2, 0.4)))
        else:
            axis = g.standard_normal(3)
            axis /= np.linalg.norm(axis)
            t = g.uniform(-0.45, 0.45, size=(n_points, 1))
            pts = 0.5 + t * axis + 0.02 * g.standard_normal((n_points, 3))
        clouds.append(PointCloud(pts, np.ones((n_points, 1))))
        labels.append(label)
    return clouds, np.asarray(labels, dtype=np.int64)


# --- metrics ------------------------------------------------------------------


@dataclass
class Metrics:
    accuracy: float
    iou: np.ndarray  # per class; NaN for classes absent from ground truth
    miou: float
    confusion: np.ndarray  # rows = true class, cols = predicted


def metrics_from_predictions(pred, labels, n_classes: int) -> Metrics:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise ShapeMismatchError(f"pred {pred.shape} and labels {labels.shape} disagree")
    if labels.min() < 0 or labels.max() >= n_classes or pred.min() < 0 or pred.max() >= n_classes:
        raise IndexOutOfRangeError(f"class ids must lie in [0, {n_classes})")
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    accuracy = float(np.trace(confusion) / labels.size)
    iou = np.full(n_classes, np.nan)
    for c in range(n_classes):
        tp = confusion[c, c]
        denom = confusion[c, :].sum() + confusion[:, c].sum() - tp
        if confusion[c, :].sum() > 0:
            iou[c] = tp / denom if denom > 0 else 0.0
    miou = float(np.nanmean(iou)) if np.isfinite(iou).any() else 0.0
    return Metrics(accuracy, iou, miou, confusion)


def evaluate(logits, labels) -> Metrics:
    """Confusion-derived accuracy, per-class IoU = TP/(TP+FP+FN), and mIoU
    averaged over classes present in the ground truth."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeMismatchError("logits must be n x n_classes")
    return metrics_from_predictions(logits.argmax(axis=1), labels, logits.shape[1])


def metrics_csv(m: Metrics) -> str:
    """CSV block: one summary line then one line per class."""
    lines = ["metric,class,value", f"accuracy,,{repr(float(m.accuracy))}",
             f"miou,,{repr(float(m.miou))}"]
    for c, v in enumerate(m.iou):
        lines.append(f"iou,{c},{repr(float(v))}")
    return "\n".join(lines) + "\n"


# --- memory model and scaling benchmark ---------------------------------------


def forward_output_bytes(n_points: int, c_out: int, itemsize: int = 4) -> int:
    """Analytic size of one forward output buffer (n_points rows of c_out)."""
    return n_points * c_out * itemsize


def conv_live_bytes(n: int, k: int, c_in: int, c_out: int, d: int, itemsize: int = 8) -> int:
    """Analytic bytes of live buffers for one flex-conv call: input and output
    features, locations, neighbor index (int64), and parameters."""
    return (n * c_in * itemsize + n * c_out * itemsize + n * d * itemsize
            + n * k * 8 + flexops.param_count(c_in, c_out, d) * itemsize)


@dataclass
class BenchRow:
    n: int
    k: int
    channels: int
    reps: int
    forward_s: float
    backward_s: float
    naive_forward_s: float
    memory_bytes: int
    threads: int


BENCH_CSV_HEADER = "n,k,channels,reps,forward_s,backward_s,naive_forward_s,memory_bytes,threads"


def bench_csv(rows: list[BenchRow]) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.n},{r.k},{r.channels},{r.reps},{repr(float(r.forward_s))},"
                     f"{repr(float(r.backward_s))},{repr(float(r.naive_forward_s))},"
                     f"{r.memory_bytes},{r.threads}")
    return "\n".join(lines) + "\n"


def scaling_svg(rows: list[BenchRow], width: int = 640, height: int = 400) -> str:
    """Minimal static SVG line plot of forward time vs n (tuned and, when
    measured, naive). Log-log axes, no interactivity."""
    pad = 60
    xs = [np.log10(r.n) for r in rows]
    series = [("tuned", "#1f77b4", [r.forward_s for r in rows])]
    if all(np.isfinite(r.naive_forward_s) for r in rows):
        series.append(("naive", "#d62728", [r.naive_forward_s for r in rows]))
    all_y = [np.log10(v) for _, _, vs in series for v in vs]
    x_lo, x_hi = min(xs), max(xs) or 1.0
    y_lo, y_hi = min(all_y), max(all_y)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x):
        return pad + (x - x_lo) / x_span * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / y_span * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 16}" text-anchor="middle" font-size="13">points (log10)</text>',
        f'<text x="16" y="{height // 2}" font-size="13" transform="rotate(-90 16 {height // 2})" '
        f'text-anchor="middle">forward seconds (log10)</text>',
    ]
    for i, (label, color, vs) in enumerate(series):
        pts = " ".join(f"{sx(x):.1f},{sy(np.log10(v)):.1f}" for x, v in zip(xs, vs))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, v in zip(xs, vs):
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(np.log10(v)):.1f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width - pad - 60}" y="{pad + 18 * i}" fill="{color}" '
                     f'font-size="13">{label}</text>')
    for r, x in zip(rows, xs):
        parts.append(f'<text x="{sx(x):.1f}" y="{height - pad + 16}" text-anchor="middle" '
                     f'font-size="11">{r.n}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _median_time(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_scaling(sizes, k: int, channels: int, reps: int = 3, rng: Rng | None = None,
                  num_threads: int = 1, include_naive: bool = True,
                  include_backward: bool = True) -> list[BenchRow]:
    """Time a single flex-conv layer across point counts (fixed k, C=C').

    The tuned column uses the active backend; the naive column re-runs the
    forward pass on the pure-numpy reference kernels. Neighborhoods are built
    once per size and not timed. Memory is the analytic live-buffer model.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 1:
        raise ConfigInvalidError("sizes must be a nonempty list of positive point counts")
    if reps < 1:
        raise ConfigInvalidError("reps must be >= 1")
    rng = rng or Rng(0)
    rows = []
    for n in sizes:
        g = rng.spawn(n).gen
        locs = g.uniform(0.0, 1.0, size=(n, 3))
        feats = g.standard_normal((n, channels))
        kk = min(k, n)
        tree = build_kdtree(locs)
        nbr = knn_query(tree, tree.points, kk, num_threads)
        params = FlexConvParams(g.standard_normal((channels, channels, 3)) * 0.1,
                                g.standard_normal((channels, channels)) * 0.1)
        fwd = _median_time(
            lambda: flexops.flex_conv_forward(feats, locs, nbr, params, num_threads), reps)
        bwd = float("nan")
        if include_backward:
            up = g.standard_normal((n, channels))
            bwd = _median_time(
                lambda: flexops.flex_conv_backward(up, feats, locs, nbr, params,
                                                   with_locations=True), reps)
        naive = float("nan")
        if include_naive:
            with backend.use("reference"):
                naive = _median_time(
                    lambda: flexops.flex_conv_forward(feats, locs, nbr, params, num_threads),
                    reps)
        rows.append(BenchRow(n, kk, channels, reps, fwd, bwd, naive,
                             conv_live_bytes(n, kk, channels, channels, 3), num_threads))
    return rows


# --- training loops ------------------------------------------------------------


@dataclass
class PreparedScene:
    hierarchy: ResolutionHierarchy
    features: np.ndarray
    labels: np.ndarray


def prepare_scene(cloud: PointCloud, labels, stages: int, k: int, factor: int,
                  rng: Rng, mode: str = "idiss", num_threads: int = 1,
                  leaf_size: int = 16) -> PreparedScene:
    """Precompute the hierarchy (kd-trees, kNN, subsampling) for one scene."""
    h = build_hierarchy(cloud, k, factor, stages, rng, mode, num_threads, leaf_size)
    return PreparedScene(h, cloud.features, np.asarray(labels, dtype=np.int64))


@dataclass
class TrainResult:
    losses: list[float]
    evals: list[tuple[int, float, float]]  # (step, accuracy, miou)
    final: Metrics
    steps_run: int


def _eval_segmentation(graph, scenes, num_threads) -> Metrics:
    preds, labels = [], []
    for sc in scenes:
        logits = graph.forward(sc.hierarchy, sc.features, num_threads)
        preds.append(logits.argmax(axis=1))
        labels.append(sc.labels)
    graph._tape = None  # evaluation passes record no gradients
    graph._run = None
    return metrics_from_predictions(np.concatenate(preds), np.concatenate(labels), graph.n_out)


def train_segmentation(graph: LayerGraph, adam: AdamState, train: list[PreparedScene],
                       heldout: list[PreparedScene], steps: int, batch: int = 1,
                       eval_every: int = 100, target_miou: float | None = None,
                       num_threads: int = 1, log=None) -> TrainResult:
    """Per-scene training with gradient accumulation over `batch` scenes.

    Evaluates held-out mIoU every `eval_every` steps; stops early once
    `target_miou` is reached (deterministic given seed and data order).
    """
    losses, evals = [], []
    step = 0
    scene_cursor = 0
    while step < steps:
        grads = np.zeros(graph.store.size)
        loss_acc = 0.0
        for _ in range(batch):
            sc = train[scene_cursor % len(train)]
            scene_cursor += 1
            logits = graph.forward(sc.hierarchy, sc.features, num_threads)
            loss, g = softmax_cross_entropy(logits, sc.labels)
            grads += graph.backward(g)
            loss_acc += loss
        grads /= batch
        adam_step(adam, graph.params, grads)
        losses.append(loss_acc / batch)
        step += 1
        if log is not None:
            log(step, losses[-1])
        if eval_every and (step % eval_every == 0 or step == steps) and heldout:
            m = _eval_segmentation(graph, heldout, num_threads)
            evals.append((step, m.accuracy, m.miou))
            if target_miou is not None and m.miou >= target_miou:
                break
    final = _eval_segmentation(graph, heldout if heldout else train, num_threads)
    return TrainResult(losses, evals, final, step)


def train_classifier(graph: LayerGraph, adam: AdamState, clouds: list[PreparedScene],
                     labels, steps: int, num_threads: int = 1, log=None) -> TrainResult:
    """Single-cloud-per-step classifier training (labels are per cloud)."""
    labels = np.asarray(labels, dtype=np.int64)
    losses = []
    for step in range(steps):
        i = step % len(clouds)
        logits = graph.forward(clouds[i].hierarchy, clouds[i].features, num_threads)
        loss, g = softmax_cross_entropy(logits, labels[i:i + 1])
        grads = graph.backward(g)
        adam_step(adam, graph.params, grads)
        losses.append(loss)
        if log is not None:
            log(step + 1, loss)
    preds = []
    for sc in clouds:
        preds.append(int(graph.forward(sc.hierarchy, sc.features, num_threads).argmax()))
    graph._tape = None
    graph._run = None
    final = metrics_from_predictions(np.asarray(preds), labels, graph.n_out)
    return TrainResult(losses, [], final, steps)
