"""Layer-graph composition and training machinery.

The segmentation network is an encoder-decoder over a resolution hierarchy:
each encoder stage runs two ResNet blocks (1x1 conv, flex-conv, flex-conv,
with the shortcut taken after the 1x1) and ends in flex-max-pool + factor-f
subsampling; the decoder mirrors it with flex-upsampling and U-Net style
concatenation skips. Point coordinates are concatenated to the features at
every stage input so position stays available at depth. No BatchNorm
anywhere; training must be stable without it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import flexops
from .core import Rng
from .errors import (
    ConfigInvalidError,
    IndexOutOfRangeError,
    IoFailureError,
    NonFiniteError,
    ShapeMismatchError,
)
from .flexops import FlexConvParams
from .sampling import ResolutionHierarchy


class ParamStore:
    """Flat float64 parameter vector with named per-layer views."""

    def __init__(self):
        self._slots: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._size = 0
        self.vec: np.ndarray | None = None

    def alloc(self, name: str, shape) -> None:
        if name in self._slots:
            raise ConfigInvalidError(f"duplicate parameter name {name!r}")
        self._slots[name] = (self._size, tuple(int(s) for s in shape))
        self._size += int(np.prod(shape))

    def finalize(self) -> None:
        self.vec = np.zeros(self._size)

    def view(self, name: str, vec: np.ndarray | None = None) -> np.ndarray:
        off, shape = self._slots[name]
        v = self.vec if vec is None else vec
        return v[off:off + int(np.prod(shape))].reshape(shape)

    @property
    def size(self) -> int:
        return self._size

    def names(self):
        return list(self._slots)


class _RunState:
    def __init__(self, hierarchy, num_threads):
        self.hierarchy = hierarchy
        self.num_threads = num_threads
        self.buffers = {}
        self.grad_buffers = {}


# --- layers ------------------------------------------------------------------
# Each layer: out_channels() for build-time shape validation, forward(x, run)
# -> (y, tape entry), backward(g, entry, run, grads) -> upstream gradient.


class _AttachLocation:
    kind = "AttachLocation"

    def __init__(self, level, d):
        self.level = level
        self.d = d

    def out_channels(self, c_in):
        return c_in + self.d

    def forward(self, x, run):
        loc = run.hierarchy.levels[self.level].cloud.locations
        return np.concatenate([x, loc], axis=1), x.shape[1]

    def backward(self, g, c_in, run, grads):
        # coordinate columns are inputs, not parameters: their grad is dropped
        return np.ascontiguousarray(g[:, :c_in])


class _Pointwise:
    kind = "PointwiseConv"

    def __init__(self, name, c_in, c_out, store):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.store = store
        store.alloc(name + ".w", (c_out, c_in))
        store.alloc(name + ".b", (c_out,))

    def out_channels(self, c_in):
        if c_in != self.c_in:
            raise ConfigInvalidError(f"{self.name}: expected {self.c_in} channels, got {c_in}")
        return self.c_out

    def forward(self, x, run):
        w = self.store.view(self.name + ".w")
        b = self.store.view(self.name + ".b")
        return flexops.pointwise_conv(x, w, b), x

    def backward(self, g, x, run, grads):
        w = self.store.view(self.name + ".w")
        d_x, d_w, d_b = flexops.pointwise_conv_backward(g, x, w)
        self.store.view(self.name + ".w", grads)[...] += d_w
        self.store.view(self.name + ".b", grads)[...] += d_b
        return d_x


class _Dense(_Pointwise):
    """Fully-connected layer; same affine math applied to a pooled row."""

    kind = "Dense"


class _FlexConv:
    kind = "FlexConv"

    def __init__(self, name, level, c_in, c_out, d, store):
        self.name = name
        self.level = level
        self.c_in = c_in
        self.c_out = c_out
        self.store = store
        store.alloc(name + ".theta", (c_out, c_in, d))
        store.alloc(name + ".theta_b", (c_out, c_in))

    def out_channels(self, c_in):
        if c_in != self.c_in:
            raise ConfigInvalidError(f"{self.name}: expected {self.c_in} channels, got {c_in}")
        return self.c_out

    def _params(self):
        return FlexConvParams(
            self.store.view(self.name + ".theta"),
            self.store.view(self.name + ".theta_b"),
        )

    def forward(self, x, run):
        lv = run.hierarchy.levels[self.level]
        y = flexops.flex_conv_forward(x, lv.cloud.locations, lv.neighbors,
                                      self._params(), run.num_threads)
        return y, x

    def backward(self, g, x, run, grads):
        lv = run.hierarchy.levels[self.level]
        gb = flexops.flex_conv_backward(g, x, lv.cloud.locations, lv.neighbors,
                                        self._params(), with_locations=False)
        self.store.view(self.name + ".theta", grads)[...] += gb.d_theta
        self.store.view(self.name + ".theta_b", grads)[...] += gb.d_theta_b
        return gb.d_features


class _Relu:
    kind = "ReLU"

    def out_channels(self, c_in):
        return c_in

    def forward(self, x, run):
        return np.maximum(x, 0.0), x > 0

    def backward(self, g, mask, run, grads):
        return g * mask


class _SaveResidual:
    kind = "SaveResidual"

    def __init__(self, slot):
        self.slot = slot

    def out_channels(self, c_in):
        return c_in

    def forward(self, x, run):
        run.buffers[self.slot] = x
        return x, None

    def backward(self, g, entry, run, grads):
        return g + run.grad_buffers.pop(self.slot)


class _AddResidual:
    kind = "AddResidual"

    def __init__(self, slot):
        self.slot = slot

    def out_channels(self, c_in):
        return c_in

    def forward(self, x, run):
        return x + run.buffers.pop(self.slot), None

    def backward(self, g, entry, run, grads):
        run.grad_buffers[self.slot] = g
        return g


class _SaveSkip(_SaveResidual):
    kind = "SaveSkip"


class _ConcatSkip:
    kind = "ConcatSkip"

    def __init__(self, slot, skip_channels):
        self.slot = slot
        self.skip_channels = skip_channels

    def out_channels(self, c_in):
        return c_in + self.skip_channels

    def forward(self, x, run):
        skip = run.buffers.pop(self.slot)
        return np.concatenate([x, skip], axis=1), x.shape[1]

    def backward(self, g, c_main, run, grads):
        run.grad_buffers[self.slot] = np.ascontiguousarray(g[:, c_main:])
        return np.ascontiguousarray(g[:, :c_main])


class _PoolDown:
    """flex-max-pool at this level, then gather the next level's selection."""

    kind = "FlexMaxPool+Downsample"

    def __init__(self, level):
        self.level = level

    def out_channels(self, c_in):
        return c_in

    def forward(self, x, run):
        lv = run.hierarchy.levels[self.level]
        pooled, record = flexops.flex_max_pool(x, lv.neighbors, run.num_threads)
        selection = run.hierarchy.levels[self.level + 1].selection
        return flexops.downsample_gather(pooled, selection), (record, selection, x.shape[0])

    def backward(self, g, entry, run, grads):
        record, selection, n_fine = entry
        g_full = np.zeros((n_fine, g.shape[1]))
        g_full[selection] = g
        return flexops.flex_max_pool_backward(g_full, record)


class _Upsample:
    kind = "FlexUpsample"

    def __init__(self, level):
        self.level = level  # target (fine) level

    def out_channels(self, c_in):
        return c_in

    def forward(self, x, run):
        selection = run.hierarchy.levels[self.level + 1].selection
        n_fine = run.hierarchy.levels[self.level].cloud.n
        y, record = flexops.flex_upsample(x, selection, run.hierarchy.levels[self.level].neighbors,
                                          n_fine, run.num_threads, with_record=True)
        return y, (record, selection)

    def backward(self, g, entry, run, grads):
        record, selection = entry
        d_scattered = flexops.flex_max_pool_backward(g, record)
        return d_scattered[selection].copy()


class _GlobalMaxPool:
    kind = "GlobalPool"

    def out_channels(self, c_in):
        return c_in

    def forward(self, x, run):
        arg = x.argmax(axis=0)  # first occurrence = lowest index on ties
        return x[arg, np.arange(x.shape[1])][None, :], (arg, x.shape[0])

    def backward(self, g, entry, run, grads):
        arg, n = entry
        out = np.zeros((n, g.shape[1]))
        out[arg, np.arange(g.shape[1])] = g[0]
        return out


@dataclass
class LayerSpec:
    """Flat description of one executed layer, for inspection and tests."""

    kind: str
    level: int | None
    c_in: int
    c_out: int


class LayerGraph:
    """Ordered layers + flat parameter store + activation tape."""

    def __init__(self, kind, d, n_f, n_out, stages, base_channels, k, factor):
        self.kind = kind
        self.d = d
        self.n_f = n_f
        self.n_out = n_out
        self.stages = stages
        self.base_channels = base_channels
        self.k = k
        self.factor = factor
        self.layers = []
        self.store = ParamStore()
        self.encoder_widths = []
        self.skip_slots = {}  # slot -> (level, channels)
        self._channel_chain = []
        self._tape = None
        self._run = None

    def config(self) -> dict:
        return {
            "kind": self.kind, "d": self.d, "n_f": self.n_f, "n_out": self.n_out,
            "stages": self.stages, "base_channels": self.base_channels,
            "k": self.k, "factor": self.factor,
        }

    def specs(self) -> list[LayerSpec]:
        out = []
        for layer, (c_in, c_out) in zip(self.layers, self._channel_chain):
            out.append(LayerSpec(layer.kind, getattr(layer, "level", None), c_in, c_out))
        return out

    @property
    def params(self) -> np.ndarray:
        return self.store.vec

    def param_count(self) -> int:
        return self.store.size

    def _validate(self, c_in):
        """Chain declared channel counts through every layer."""
        chain = []
        c = c_in
        for layer in self.layers:
            c_out = layer.out_channels(c)
            chain.append((c, c_out))
            c = c_out
        if c != self.n_out:
            raise ConfigInvalidError(f"graph produces {c} channels, expected {self.n_out}")
        self._channel_chain = chain

    def forward(self, hierarchy: ResolutionHierarchy, features, num_threads: int = 1):
        if hierarchy.depth != self.stages:
            raise ShapeMismatchError(
                f"hierarchy depth {hierarchy.depth} != graph stages {self.stages}"
            )
        features = np.ascontiguousarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.n_f:
            raise ShapeMismatchError(f"features must be n x {self.n_f}, got {features.shape}")
        if features.shape[0] != hierarchy.levels[0].cloud.n:
            raise ShapeMismatchError("feature rows do not match hierarchy level 0")
        run = _RunState(hierarchy, num_threads)
        tape = []
        x = features
        for layer in self.layers:
            x, entry = layer.forward(x, run)
            tape.append(entry)
        self._tape = tape
        self._run = run
        return x

    def backward(self, loss_grad) -> np.ndarray:
        if self._tape is None:
            raise ConfigInvalidError("backward called without a recorded forward pass")
        grads = np.zeros(self.store.size)
        g = np.ascontiguousarray(loss_grad, dtype=np.float64)
        run = self._run
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g = layer.backward(g, self._tape[i], run, grads)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient flowing out of layer {i} ({layer.kind})")
        self._tape = None
        self._run = None
        if not np.isfinite(grads).all():
            raise NonFiniteError("non-finite parameter gradient")
        return grads


def forward(graph: LayerGraph, hierarchy: ResolutionHierarchy, features, num_threads: int = 1):
    return graph.forward(hierarchy, features, num_threads)


def backward(graph: LayerGraph, loss_grad) -> np.ndarray:
    return graph.backward(loss_grad)


def _add_resnet_block(graph, prefix, level, c_in, width, slot):
    """1x1 conv, flex-conv, flex-conv; the last flex output is added to the
    1x1 output. ReLU after each convolution except the residual-add output."""
    g = graph
    g.layers.append(_Pointwise(f"{prefix}.pw", c_in, width, g.store))
    g.layers.append(_SaveResidual(slot))
    g.layers.append(_Relu())
    g.layers.append(_FlexConv(f"{prefix}.conv1", level, width, width, g.d, g.store))
    g.layers.append(_Relu())
    g.layers.append(_FlexConv(f"{prefix}.conv2", level, width, width, g.d, g.store))
    g.layers.append(_AddResidual(slot))
    return width


def _add_stage(graph, prefix, level, c_in, width):
    graph.layers.append(_AttachLocation(level, graph.d))
    c = c_in + graph.d
    c = _add_resnet_block(graph, f"{prefix}.block1", level, c, width, f"{prefix}.res1")
    c = _add_resnet_block(graph, f"{prefix}.block2", level, c, width, f"{prefix}.res2")
    return c


def _check_build_args(stages, base_channels, d, n_f, n_out, k, factor):
    if stages < 1:
        raise ConfigInvalidError(f"stages must be >= 1, got {stages}")
    if base_channels < 1:
        raise ConfigInvalidError(f"base_channels must be >= 1, got {base_channels}")
    if min(d, n_f, n_out, k) < 1:
        raise ConfigInvalidError("d, n_f, n_out and k must all be >= 1")
    if factor < 2:
        raise ConfigInvalidError(f"factor must be >= 2, got {factor}")


def build_segnet(d: int, n_f: int, n_c: int, stages: int, base_channels: int,
                 k: int, factor: int) -> LayerGraph:
    """Encoder-decoder per-point segmentation network.

    Stage t runs at width base_channels * 2**t; a bottleneck stage at the
    deepest level doubles once more. The decoder mirrors the encoder (same
    block count), merging skips by concatenation + 1x1 conv, and ends in a
    pointwise classifier producing per-point logits over n_c classes.
    """
    _check_build_args(stages, base_channels, d, n_f, n_c, k, factor)
    g = LayerGraph("segmentation", d, n_f, n_c, stages, base_channels, k, factor)
    widths = [base_channels * 2 ** t for t in range(stages + 1)]
    g.encoder_widths = widths
    c = n_f
    for t in range(stages):
        c = _add_stage(g, f"enc{t}", t, c, widths[t])
        g.layers.append(_SaveSkip(f"skip{t}"))
        g.skip_slots[f"skip{t}"] = (t, c)
        g.layers.append(_PoolDown(t))
    c = _add_stage(g, "bottom", stages, c, widths[stages])
    for t in range(stages - 1, -1, -1):
        g.layers.append(_Upsample(t))
        g.layers.append(_ConcatSkip(f"skip{t}", g.skip_slots[f"skip{t}"][1]))
        c = c + g.skip_slots[f"skip{t}"][1]
        g.layers.append(_AttachLocation(t, d))
        c += d
        g.layers.append(_Pointwise(f"dec{t}.merge", c, widths[t], g.store))
        g.layers.append(_Relu())
        c = widths[t]
        c = _add_resnet_block(g, f"dec{t}.block1", t, c, widths[t], f"dec{t}.res1")
        c = _add_resnet_block(g, f"dec{t}.block2", t, c, widths[t], f"dec{t}.res2")
    g.layers.append(_Pointwise("classifier", c, n_c, g.store))
    g.store.finalize()
    g._validate(n_f)
    return g


def build_classifier(d: int, n_f: int, n_classes: int, stages: int,
                     base_channels: int, k: int, factor: int = 4) -> LayerGraph:
    """Encoder stages, global max pool over the remaining points, dense logits."""
    _check_build_args(stages, base_channels, d, n_f, n_classes, k, factor)
    g = LayerGraph("classification", d, n_f, n_classes, stages, base_channels, k, factor)
    widths = [base_channels * 2 ** t for t in range(stages + 1)]
    g.encoder_widths = widths
    c = n_f
    for t in range(stages):
        c = _add_stage(g, f"enc{t}", t, c, widths[t])
        g.layers.append(_PoolDown(t))
    c = _add_stage(g, "bottom", stages, c, widths[stages])
    g.layers.append(_GlobalMaxPool())
    g.layers.append(_Dense("head", c, n_classes, g.store))
    g.store.finalize()
    g._validate(n_f)
    return g


def average_neighbor_distance(hierarchy: ResolutionHierarchy) -> float:
    """Mean distance from each level-0 point to its non-self neighbors."""
    lv = hierarchy.levels[0]
    idx = lv.neighbors.indices
    if idx.shape[1] < 2:
        return 0.0
    diff = lv.cloud.locations[:, None, :] - lv.cloud.locations[idx[:, 1:]]
    return float(np.sqrt((diff ** 2).sum(axis=-1)).mean())


def initialize_params(graph: LayerGraph, rng: Rng, hierarchy: ResolutionHierarchy) -> None:
    """Fill the parameter store.

    Flex-conv offset weights scale with the data's neighbor-distance scale
    (they multiply spatial offsets, so the init must reference it): theta ~
    U(-s, s) with s = 1/(k * sqrt(C_in * avg_dist)), theta_b ~ U(-1/k, 1/k).
    Pointwise/dense layers use Glorot-uniform weights and U(-1/sqrt(C_in),
    1/sqrt(C_in)) biases; a nonzero bias keeps zero-filled upsample rows off
    the exact ReLU kink.
    """
    avg = average_neighbor_distance(hierarchy)
    if not np.isfinite(avg) or avg <= 0:
        avg = 1.0
    k = graph.k
    for layer in graph.layers:
        if isinstance(layer, _FlexConv):
            s = 1.0 / (k * np.sqrt(layer.c_in * avg))
            th = graph.store.view(layer.name + ".theta")
            th[...] = rng.gen.uniform(-s, s, size=th.shape)
            tb = graph.store.view(layer.name + ".theta_b")
            tb[...] = rng.gen.uniform(-1.0 / k, 1.0 / k, size=tb.shape)
        elif isinstance(layer, _Pointwise):
            w = graph.store.view(layer.name + ".w")
            limit = np.sqrt(6.0 / (layer.c_in + layer.c_out))
            w[...] = rng.gen.uniform(-limit, limit, size=w.shape)
            b = graph.store.view(layer.name + ".b")
            b[...] = rng.gen.uniform(-1.0, 1.0, size=b.shape) / np.sqrt(layer.c_in)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over points, max-stabilized. Returns (loss, grad)."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"logits {logits.shape} and labels {labels.shape} are inconsistent"
        )
    n, n_c = logits.shape
    if labels.min() < 0 or labels.max() >= n_c:
        raise IndexOutOfRangeError(f"labels must lie in [0, {n_c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_adam(n_params: int, lr: float = 3e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params, grads) -> None:
    """Standard Adam update, in place on params and state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.m.shape:
        raise ShapeMismatchError("params, grads and Adam moments must share one shape")
    if not np.isfinite(grads).all():
        raise NonFiniteError("non-finite gradient in Adam step")
    state.step += 1
    state.m += (1.0 - state.beta1) * (grads - state.m)
    state.v += (1.0 - state.beta2) * (grads ** 2 - state.v)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if not np.isfinite(params).all():
        raise NonFiniteError("non-finite parameter after Adam step")


# --- checkpoint format: one JSON header line + raw little-endian float64 -----


def save_checkpoint(path, config: dict, params, adam: AdamState | None = None) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    header = {
        "format": "flexckpt",
        "version": 1,
        "config": config,
        "n_params": int(params.size),
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step": adam.step,
        },
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(params.tobytes())
            if adam is not None:
                fh.write(np.ascontiguousarray(adam.m, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(adam.v, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailureError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns (config, params, adam-or-None); truncation is a config error."""
    try:
        with open(path, "rb") as fh:
            head_line = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        header = json.loads(head_line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigInvalidError(f"{path}: malformed checkpoint header") from exc
    if header.get("format") != "flexckpt" or header.get("version") != 1:
        raise ConfigInvalidError(f"{path}: not a flexckpt v1 file")
    n = int(header["n_params"])
    n_arrays = 1 if header["adam"] is None else 3
    if len(blob) != 8 * n * n_arrays:
        raise ConfigInvalidError(f"{path}: truncated or oversized checkpoint body")
    arrays = [np.frombuffer(blob, dtype="<f8", count=n, offset=8 * n * t).copy()
              for t in range(n_arrays)]
    adam = None
    if header["adam"] is not None:
        a = header["adam"]
        adam = AdamState(arrays[1], arrays[2], int(a["step"]),
                         float(a["lr"]), float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
    return header["config"], arrays[0], adam
