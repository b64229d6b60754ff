"""Residual 1-D CNN classifier: spec, initialization, forward and backward."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, DataError, NumericError, ShapeError
from . import layers as L

DEBUG = False


def set_debug(flag: bool) -> None:
    """Enable finiteness checks after every layer."""
    global DEBUG
    DEBUG = bool(flag)


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class StageSpec:
    channels: int
    kernel: int
    stride: int
    count: int


@dataclass(frozen=True)
class ModelSpec:
    input_len: int
    num_classes: int
    stem: ConvSpec
    stages: tuple = field(default_factory=tuple)
    input_channels: int = 2
    preset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes")
        if self.input_channels != 2:
            problems.append("input_channels")
        if not self.stages:
            problems.append("stages")
        if self.input_len < 1:
            problems.append("input_len")
        convs = [("stem", self.stem)] + [(f"stages[{i}]", st) for i, st in enumerate(self.stages)]
        for name, c in convs:
            if c.channels < 1 or c.kernel < 1 or c.stride < 1 or getattr(c, "count", 1) < 1:
                problems.append(name)
        if problems:
            raise ConfigError(f"invalid model spec: {', '.join(problems)}", problems)
        length = self.input_len
        for name, kernel, stride in self._length_chain():
            length = L.conv_out_len(length, kernel, stride)
            if length < 1:
                raise ConfigError(f"{name}: sequence length collapses to {length}", [name])

    def _length_chain(self):
        yield "stem.conv", self.stem.kernel, self.stem.stride
        for i, st in enumerate(self.stages):
            yield f"s{i}.b0.conv1", st.kernel, st.stride

    @property
    def feature_dim(self) -> int:
        return self.stages[-1].channels

    @property
    def num_units(self) -> int:
        """Freezable trunk units: the stem plus each stage."""
        return 1 + len(self.stages)

    def with_classes(self, num_classes: int) -> "ModelSpec":
        return ModelSpec(self.input_len, num_classes, self.stem, self.stages,
                         self.input_channels, self.preset)

    def to_dict(self) -> dict:
        return {"input_len": self.input_len, "num_classes": self.num_classes,
                "input_channels": self.input_channels, "preset": self.preset,
                "stem": asdict(self.stem), "stages": [asdict(s) for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        expected = {"input_len", "num_classes", "input_channels", "preset", "stem", "stages"}
        if set(d) != expected:
            raise ConfigError(f"model spec keys {sorted(d)} differ from {sorted(expected)}", ["model_spec"])
        return cls(input_len=int(d["input_len"]), num_classes=int(d["num_classes"]),
                   stem=ConvSpec(**d["stem"]), stages=tuple(StageSpec(**s) for s in d["stages"]),
                   input_channels=int(d["input_channels"]), preset=str(d["preset"]))


PRESETS = {
    "tiny": (ConvSpec(4, 3, 1), [StageSpec(4, 3, 1, 1), StageSpec(6, 3, 2, 1)]),
    "small": (ConvSpec(16, 7, 2), [StageSpec(16, 3, 1, 1), StageSpec(32, 3, 2, 1),
                                   StageSpec(64, 3, 2, 1), StageSpec(64, 3, 2, 1)]),
    "resnet34-1d": (ConvSpec(64, 7, 2), [StageSpec(64, 3, 1, 3), StageSpec(128, 3, 2, 4),
                                         StageSpec(256, 3, 2, 6), StageSpec(512, 3, 2, 3)]),
}


def preset(name: str, input_len: int, num_classes: int) -> ModelSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}", ["preset"])
    stem, stages = PRESETS[name]
    return ModelSpec(input_len, num_classes, stem, tuple(stages), preset=name)


# -- parameter layout -----------------------------------------------------------

def _blocks(spec: ModelSpec):
    """Yield (unit, prefix, c_in, c_out, kernel, stride) per residual block."""
    c_in = spec.stem.channels
    for i, st in enumerate(spec.stages):
        for j in range(st.count):
            stride = st.stride if j == 0 else 1
            yield i + 1, f"s{i}.b{j}", c_in, st.channels, st.kernel, stride
            c_in = st.channels


def _needs_projection(c_in, c_out, stride):
    return c_in != c_out or stride != 1


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    """Every tensor in a checkpoint, in canonical order (BN buffers included)."""
    shapes = {}

    def bn(prefix, c):
        for name in ("gamma", "beta", "mean", "var"):
            shapes[f"{prefix}.{name}"] = (c,)

    shapes["stem.conv.w"] = (spec.stem.channels, spec.input_channels, spec.stem.kernel)
    bn("stem.bn", spec.stem.channels)
    for _, p, c_in, c_out, k, stride in _blocks(spec):
        shapes[f"{p}.conv1.w"] = (c_out, c_in, k)
        bn(f"{p}.bn1", c_out)
        shapes[f"{p}.conv2.w"] = (c_out, c_out, k)
        bn(f"{p}.bn2", c_out)
        if _needs_projection(c_in, c_out, stride):
            shapes[f"{p}.down.w"] = (c_out, c_in, 1)
            bn(f"{p}.down_bn", c_out)
    shapes["head.w"] = (spec.num_classes, spec.feature_dim)
    shapes["head.b"] = (spec.num_classes,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(".mean") or name.endswith(".var")


def unit_of(name: str, spec: ModelSpec) -> int:
    """Trunk unit owning a parameter; the head is ``spec.num_units``."""
    if name.startswith("stem."):
        return 0
    if name.startswith("head."):
        return spec.num_units
    return int(name.split(".", 1)[0][1:]) + 1


def init_weights(spec: ModelSpec, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Kaiming-normal (fan-in) convolution/dense weights, unit BN, zero biases."""
    rng = np.random.default_rng(int(seed))
    weights = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("head.") else 2.0
            weights[name] = rng.normal(0.0, np.sqrt(gain / fan_in), shape).astype(dtype)
        elif name.endswith(".gamma") or name.endswith(".var"):
            weights[name] = np.ones(shape, dtype=dtype)
        else:
            weights[name] = np.zeros(shape, dtype=dtype)
    return weights


def init_head_rows(spec: ModelSpec, rows: int, seed: int, dtype=np.float32):
    rng = np.random.default_rng(int(seed))
    w = rng.normal(0.0, np.sqrt(1.0 / spec.feature_dim), (rows, spec.feature_dim)).astype(dtype)
    return w, np.zeros(rows, dtype=dtype)


def check_weights(spec: ModelSpec, weights) -> None:
    expected = param_shapes(spec)
    missing = sorted(set(expected) - set(weights))
    if missing:
        raise ShapeError(missing[0], expected[missing[0]], "missing")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != tuple(shape):
            raise ShapeError(name, shape, tuple(weights[name].shape))


# -- forward / backward ---------------------------------------------------------

class ForwardResult:
    __slots__ = ("logits", "features", "tape", "running")

    def __init__(self, logits, features, tape, running):
        self.logits = logits
        self.features = features
        self.tape = tape
        self.running = running


def _finite(name, x):
    if DEBUG and not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation after {name}")


def forward(spec: ModelSpec, weights, batch, *, train=False, frozen_units=0, keep_tape=None,
            capture_features=False, probe=None) -> ForwardResult:
    """Run the network on a (N, 2, L) batch.

    ``train`` selects batch statistics for BN in units at or above
    ``frozen_units``; frozen units always run in eval mode. The tape needed by
    :func:`backward` is kept when ``keep_tape`` (default: ``train``). When
    ``probe`` is a list, every ReLU input is appended to it.
    """
    batch = np.asarray(batch)
    want = (spec.input_channels, spec.input_len)
    if batch.ndim != 3 or tuple(batch.shape[1:]) != want:
        raise ShapeError("stem.conv", ("N",) + want, tuple(batch.shape))
    keep = train if keep_tape is None else keep_tape
    dtype = weights["head.w"].dtype
    x = np.ascontiguousarray(batch.transpose(0, 2, 1), dtype=dtype)
    tape = []
    running = {}

    def relu(z):
        if probe is not None:
            probe.append(z)
        return L.relu_forward(z)

    def record(unit, entry):
        if keep and unit >= frozen_units:
            tape.append(entry)

    def conv_bn(unit, conv, bn, x, stride):
        y, c_cache = L.conv1d_forward(x, weights[conv + ".w"], stride)
        bn_train = train and unit >= frozen_units
        y, b_cache = L.batchnorm_forward(y, weights[bn + ".gamma"], weights[bn + ".beta"],
                                         weights[bn + ".mean"], weights[bn + ".var"], bn_train)
        if b_cache["running"] is not None:
            running[bn + ".mean"], running[bn + ".var"] = b_cache["running"]
        _finite(bn, y)
        return y, (conv, c_cache, bn, b_cache)

    y, cc = conv_bn(0, "stem.conv", "stem.bn", x, spec.stem.stride)
    x, mask = relu(y)
    record(0, ("stem", cc, mask))

    for unit, p, c_in, c_out, k, stride in _blocks(spec):
        h, c1 = conv_bn(unit, f"{p}.conv1", f"{p}.bn1", x, stride)
        h, m1 = relu(h)
        h, c2 = conv_bn(unit, f"{p}.conv2", f"{p}.bn2", h, 1)
        if _needs_projection(c_in, c_out, stride):
            sc, cd = conv_bn(unit, f"{p}.down", f"{p}.down_bn", x, stride)
        else:
            sc, cd = x, None
        s, _ = L.add_forward(h, sc)
        x, m2 = relu(s)
        record(unit, ("block", p, c1, m1, c2, cd, m2))

    feats, gshape = L.gap_forward(x)
    logits, dcache = L.dense_forward(feats, weights["head.w"], weights["head.b"])
    _finite("head", logits)
    tape.append(("head", gshape, dcache))
    return ForwardResult(logits, feats if capture_features else None, tape if keep else None, running)


def _conv_bn_backward(dy, weights, cache, grads):
    conv, c_cache, bn, b_cache = cache
    dy, grads[bn + ".gamma"], grads[bn + ".beta"] = L.batchnorm_backward(dy, b_cache)
    dx, grads[conv + ".w"] = L.conv1d_backward(dy, weights[conv + ".w"], c_cache)
    return dx


def backward(spec: ModelSpec, weights, result: ForwardResult, dlogits) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor recorded on the forward tape."""
    if result.tape is None:
        raise ConfigError("forward pass was run without a tape")
    grads = {}
    tape = result.tape
    _, gshape, feats = tape[-1]
    dfeat, grads["head.w"], grads["head.b"] = L.dense_backward(dlogits, weights["head.w"], feats)
    dx = L.gap_backward(dfeat, gshape)
    for entry in reversed(tape[:-1]):
        if entry[0] == "block":
            _, p, c1, m1, c2, cd, m2 = entry
            ds = L.relu_backward(dx, m2)
            dh, dsc = L.add_backward(ds)
            dh = _conv_bn_backward(dh, weights, c2, grads)
            dh = L.relu_backward(dh, m1)
            dx = _conv_bn_backward(dh, weights, c1, grads)
            dx = dx + (dsc if cd is None else _conv_bn_backward(dsc, weights, cd, grads))
        else:
            _, cc, mask = entry
            _conv_bn_backward(L.relu_backward(dx, mask), weights, cc, grads)
    return grads


def model_forward(spec: ModelSpec, weights, batch, capture_features=False):
    """Eval-mode logits (and last-hidden-layer features when requested)."""
    check_weights(spec, weights)
    res = forward(spec, weights, batch, train=False, capture_features=capture_features)
    return res.logits, res.features


def loss_and_grad(spec: ModelSpec, weights, batch, labels, *, frozen_units=0, train=True):
    """Mean softmax cross-entropy and gradients of all non-frozen trainable tensors."""
    loss, grads, _ = loss_grad_forward(spec, weights, batch, labels, frozen_units=frozen_units, train=train)
    return loss, grads


def loss_grad_forward(spec, weights, batch, labels, *, frozen_units=0, train=True):
    """:func:`loss_and_grad` that also returns the forward result (running BN stats, logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (np.asarray(batch).shape[0],):
        raise ShapeError("labels", (np.asarray(batch).shape[0],), labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise DataError(f"labels must lie in [0, {spec.num_classes})")
    res = forward(spec, weights, batch, train=train, frozen_units=frozen_units, keep_tape=True)
    loss, dlogits = L.softmax_ce_forward(res.logits, labels)
    grads = backward(spec, weights, res, dlogits)
    return loss, grads, res


def relu_margin(spec, weights, batch, *, train=True) -> float:
    """Smallest |ReLU input| over the network; used to keep finite differences off kinks."""
    probe = []
    forward(spec, weights, batch, train=train, keep_tape=False, probe=probe)
    return float(min(np.abs(z).min() for z in probe))
