"""Spiking-DeepLab / Spiking-FCN graphs and their executor.

A network is a :class:`NetworkSpec`: an ordered list of nodes. Weighted nodes
(``lif`` and ``accumulator``) sum the currents of one or more synapses, each of
which reads the output of an earlier node (or the network input). This covers
plain chains as well as the FCN skip fusions, where a transposed convolution and
a 1x1 skip projection feed the same neuron population.

The executor runs *layer-major*: a node processes all time-steps at once.
Feed-forward synapses have no temporal recurrence, so every convolution over a
whole spike train collapses into one large GEMM; only the membrane update loops
over time. Results are identical to the step-by-step formulation.

Parameters live in a flat ``dict[str, ndarray]`` keyed ``<synapse>.weight``,
``<node>.bias``, ``<node>.bntt.{gamma,mean,var}``, ``<node>.bn.{gamma,beta,mean,var}``
and ``<node>.threshold``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, DimensionError, ModeError, ValidationError
from .neuron import fire, relaxed_activation

MODES = ("spiking", "relaxed", "ann")
BNTT_MOMENTUM = 0.1
BN_EPS = 1e-5


# -- graph description ---------------------------------------------------------


@dataclass(frozen=True)
class Synapse:
    name: str
    role: str  # conv | dilated | transpose | skip | classifier
    conv: tn.ConvSpec
    source: str

    @property
    def transposed(self) -> bool:
        return self.role == "transpose"

    @property
    def weight_shape(self) -> tuple[int, ...]:
        c = self.conv
        if self.transposed:
            return (c.in_channels, c.out_channels, c.kernel, c.kernel)
        return c.weight_shape


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # lif | accumulator | avgpool | bilinear
    synapses: tuple[Synapse, ...] = ()
    source: str = ""
    out_hw: tuple[int, int] | None = None

    @property
    def weighted(self) -> bool:
        return self.kind in ("lif", "accumulator")

    @property
    def sources(self) -> tuple[str, ...]:
        if self.weighted:
            return tuple(s.source for s in self.synapses)
        return (self.source,)


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    in_channels: int
    input_hw: tuple[int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]
    feature_end: str

    def __post_init__(self):
        self.shapes()  # validates channel chaining

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        return [l.name for l in self.layers].index(name)

    @property
    def lif_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.kind == "lif"]

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def synapses(self):
        for layer in self.layers:
            for syn in layer.synapses:
                yield layer, syn

    def shapes(self, input_hw: tuple[int, int] | None = None) -> dict[str, tuple[int, int, int]]:
        """Symbolic (C, H, W) of every node output."""
        h, w = input_hw or self.input_hw
        shapes = {"input": (self.in_channels, h, w)}
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names) or "input" in names:
            raise ConfigurationError("layer names must be unique and not 'input'")
        if self.feature_end not in names:
            raise ConfigurationError(f"feature_end {self.feature_end!r} is not a layer")
        for layer in self.layers:
            for src in layer.sources:
                if src not in shapes:
                    raise ConfigurationError(f"{layer.name}: unknown source {src!r}")
            if layer.kind == "avgpool":
                c, h, w = shapes[layer.source]
                if h % 2 or w % 2:
                    raise ConfigurationError(f"{layer.name}: odd spatial dims {h}x{w}")
                shapes[layer.name] = (c, h // 2, w // 2)
            elif layer.kind == "bilinear":
                c, h, w = shapes[layer.source]
                oh, ow = layer.out_hw if layer.out_hw else (self.input_hw if input_hw is None else input_hw)
                if oh < h or ow < w:
                    raise ConfigurationError(f"{layer.name}: bilinear cannot shrink {h}x{w}")
                shapes[layer.name] = (c, oh, ow)
            elif layer.weighted:
                if not layer.synapses:
                    raise ConfigurationError(f"{layer.name}: weighted node without synapses")
                outs = set()
                for syn in layer.synapses:
                    c, h, w = shapes[syn.source]
                    if c != syn.conv.in_channels:
                        raise ConfigurationError(
                            f"{layer.name}/{syn.name}: source {syn.source} has {c} channels, "
                            f"synapse expects {syn.conv.in_channels}"
                        )
                    if syn.transposed:
                        oh, ow = (tn.transpose_output_size(syn.conv, h), tn.transpose_output_size(syn.conv, w))
                    else:
                        oh, ow = syn.conv.output_size(h), syn.conv.output_size(w)
                    outs.add((syn.conv.out_channels, oh, ow))
                if len(outs) != 1:
                    raise ConfigurationError(f"{layer.name}: synapse outputs disagree {sorted(outs)}")
                shapes[layer.name] = outs.pop()
            else:
                raise ConfigurationError(f"unknown layer kind {layer.kind!r}")
        return shapes

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        h, w = self.input_hw
        lines = [
            f"network {self.name}",
            f"input {self.in_channels} {h} {w}",
            f"classes {self.num_classes}",
            f"features {self.feature_end}",
        ]
        for layer in self.layers:
            if layer.kind == "avgpool":
                lines.append(f"avgpool {layer.name} src={layer.source}")
            elif layer.kind == "bilinear":
                size = f" size={layer.out_hw[0]}x{layer.out_hw[1]}" if layer.out_hw else ""
                lines.append(f"bilinear {layer.name} src={layer.source}{size}")
            else:
                lines.append(f"{layer.kind} {layer.name}")
                for syn in layer.synapses:
                    c = syn.conv
                    lines.append(
                        f"  {syn.role} {syn.name} src={syn.source} in={c.in_channels} out={c.out_channels} "
                        f"k={c.kernel} s={c.stride} p={c.padding} r={c.dilation}"
                    )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        header: dict[str, list[str]] = {}
        layers: list[dict] = []
        for raw in text.splitlines():
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            parts = raw.split()
            kw = dict(p.split("=", 1) for p in parts[2:] if "=" in p)
            if raw.startswith("  "):
                if not layers or layers[-1]["kind"] not in ("lif", "accumulator"):
                    raise ConfigurationError(f"synapse line outside a weighted layer: {raw!r}")
                conv = tn.ConvSpec(
                    kernel=int(kw["k"]),
                    in_channels=int(kw["in"]),
                    out_channels=int(kw["out"]),
                    stride=int(kw["s"]),
                    padding=int(kw["p"]),
                    dilation=int(kw["r"]),
                )
                layers[-1]["synapses"].append(Synapse(parts[1], parts[0], conv, kw["src"]))
            elif parts[0] in ("network", "input", "classes", "features"):
                header[parts[0]] = parts[1:]
            elif parts[0] in ("lif", "accumulator"):
                layers.append({"kind": parts[0], "name": parts[1], "synapses": []})
            elif parts[0] in ("avgpool", "bilinear"):
                size = None
                if "size" in kw:
                    size = tuple(int(v) for v in kw["size"].split("x"))
                layers.append({"kind": parts[0], "name": parts[1], "source": kw["src"], "out_hw": size})
            else:
                raise ConfigurationError(f"unrecognised architecture line {raw!r}")
        try:
            c, h, w = (int(v) for v in header["input"])
            specs = tuple(
                LayerSpec(
                    name=d["name"],
                    kind=d["kind"],
                    synapses=tuple(d.get("synapses", ())),
                    source=d.get("source", ""),
                    out_hw=d.get("out_hw"),
                )
                for d in layers
            )
            return cls(
                name=header["network"][0],
                in_channels=c,
                input_hw=(h, w),
                num_classes=int(header["classes"][0]),
                layers=specs,
                feature_end=header["features"][0],
            )
        except (KeyError, IndexError) as exc:
            raise ConfigurationError(f"architecture text missing field {exc}") from None


# -- builders ------------------------------------------------------------------


def _scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


class _Builder:
    def __init__(self, in_channels: int):
        self.layers: list[LayerSpec] = []
        self.channels = {"input": in_channels}
        self.prev = "input"

    def lif(self, name, out, kernel=3, dilation=1, role="conv", src=None, kind="lif"):
        src = src or self.prev
        conv = tn.ConvSpec(
            kernel=kernel,
            in_channels=self.channels[src],
            out_channels=out,
            padding=tn.same_padding(kernel, dilation),
            dilation=dilation,
        )
        self._add(LayerSpec(name, kind, (Synapse(name, role, conv, src),)), out)

    def pool(self, name):
        self._add(LayerSpec(name, "avgpool", source=self.prev), self.channels[self.prev])

    def fuse(self, name, skip_src, kind="lif"):
        c = self.channels[self.prev]
        up = Synapse(f"{name}_up", "transpose", tn.upsample_spec(c, c), self.prev)
        skip = Synapse(
            f"{name}_skip",
            "skip",
            tn.ConvSpec(kernel=1, in_channels=self.channels[skip_src], out_channels=c),
            skip_src,
        )
        self._add(LayerSpec(name, kind, (up, skip)), c)

    def bilinear(self, name):
        self._add(LayerSpec(name, "bilinear", source=self.prev), self.channels[self.prev])

    def _add(self, layer, channels):
        self.layers.append(layer)
        self.channels[layer.name] = channels
        self.prev = layer.name


def _check_dims(input_dims, divisor, arch):
    c, h, w = input_dims
    if h % divisor or w % divisor:
        raise ConfigurationError(f"{arch} needs input dims divisible by {divisor}, got {h}x{w}")
    if c < 1:
        raise ConfigurationError("input needs at least one channel")


def deeplab_spec(num_classes: int, input_dims=(3, 64, 64), width: float = 1.0, dilation: int = 2) -> NetworkSpec:
    """VGG9-style backbone with two dilated convolutions, 3-layer classifier, bilinear head."""
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    _check_dims(input_dims, 4, "Spiking-DeepLab")
    ch = lambda c: _scaled(c, width)  # noqa: E731
    b = _Builder(input_dims[0])
    b.lif("c1", ch(64))
    b.lif("c2", ch(64))
    b.pool("p1")
    b.lif("c3", ch(128))
    b.lif("c4", ch(128))
    b.pool("p2")
    b.lif("c5", ch(256))
    b.lif("c6", ch(256), dilation=dilation, role="dilated")
    b.lif("c7", ch(256), dilation=dilation, role="dilated")
    b.lif("fc1", ch(1024), kernel=1)
    b.lif("fc2", ch(1024), kernel=1)
    b.lif("cls", num_classes, kernel=1, role="classifier", kind="accumulator")
    b.bilinear("head")
    return NetworkSpec("deeplab", input_dims[0], tuple(input_dims[1:]), num_classes, tuple(b.layers), "c7")


def fcn_spec(num_classes: int, input_dims=(3, 64, 64), width: float = 1.0) -> NetworkSpec:
    """Three-pool encoder, 1024-wide intermediate convs, three 2x up-fusions with skips."""
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    _check_dims(input_dims, 8, "Spiking-FCN")
    ch = lambda c: _scaled(c, width)  # noqa: E731
    b = _Builder(input_dims[0])
    b.lif("c1", ch(64))
    b.lif("c2", ch(64))
    b.pool("p1")
    b.lif("c3", ch(128))
    b.lif("c4", ch(128))
    b.pool("p2")
    b.lif("c5", ch(256))
    b.lif("c6", ch(256))
    b.lif("c7", ch(256))
    b.pool("p3")
    b.lif("fc1", ch(1024), kernel=1)
    b.lif("fc2", ch(1024), kernel=1)
    b.lif("score", num_classes, kernel=1, role="classifier")
    b.fuse("up1", "c7")
    b.fuse("up2", "c4")
    b.fuse("up3", "c2", kind="accumulator")
    return NetworkSpec("fcn", input_dims[0], tuple(input_dims[1:]), num_classes, tuple(b.layers), "p3")


# -- parameters ----------------------------------------------------------------


@dataclass
class BnttParams:
    """Per-time-step batch norm statistics and scales for one layer, each (T, C)."""

    gamma: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BNTT_MOMENTUM
    eps: float = BN_EPS


@dataclass
class ModelParams:
    mode: str
    tensors: dict[str, np.ndarray]
    leak: float = 0.99
    threshold: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}")

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def trainable(self) -> list[str]:
        suffixes = (".weight", ".bias", ".bntt.gamma", ".bn.gamma", ".bn.beta")
        return [k for k in self.tensors if k.endswith(suffixes)]

    def bntt(self, layer: str) -> BnttParams | None:
        if f"{layer}.bntt.gamma" not in self.tensors:
            return None
        t = self.tensors
        return BnttParams(t[f"{layer}.bntt.gamma"], t[f"{layer}.bntt.mean"], t[f"{layer}.bntt.var"])

    def bntt_steps(self) -> int | None:
        for k, v in self.tensors.items():
            if k.endswith(".bntt.gamma"):
                return v.shape[0]
        return None

    def layer_threshold(self, layer: str, dtype) -> float | np.ndarray:
        th = self.tensors.get(f"{layer}.threshold")
        if th is None:
            return self.threshold
        return th.reshape(1, -1, 1, 1).astype(dtype, copy=False)

    def copy(self) -> "ModelParams":
        return ModelParams(self.mode, {k: v.copy() for k, v in self.tensors.items()}, self.leak, self.threshold)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.mode, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.leak, self.threshold
        )


def init_params(
    spec: NetworkSpec,
    mode: str = "spiking",
    timesteps: int = 20,
    seed: int = 0,
    leak: float = 0.99,
    threshold: float = 1.0,
    norm: bool = True,
    dtype=np.float32,
) -> ModelParams:
    """Fan-in scaled uniform weights (bound sqrt(1/fan_in)).

    With ``norm`` spiking layers get BNTT and ANN layers get batch norm;
    without it ANN layers carry a plain bias instead.
    """
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for layer, syn in spec.synapses():
        c = syn.conv
        fan_in = c.in_channels * c.kernel**2
        if syn.transposed:
            # effective fan-in of a stride-2 transposed conv
            fan_in = max(1, c.in_channels * (c.kernel // c.stride) ** 2)
        bound = math.sqrt(1.0 / fan_in)
        tensors[f"{syn.name}.weight"] = rng.uniform(-bound, bound, size=syn.weight_shape).astype(dtype)
    for layer in spec.layers:
        if layer.kind != "lif":
            continue
        cout = layer.synapses[0].conv.out_channels
        if mode == "ann" and not norm:
            tensors[f"{layer.name}.bias"] = np.zeros(cout, dtype)
        elif mode == "ann":
            tensors[f"{layer.name}.bn.gamma"] = np.ones(cout, dtype)
            tensors[f"{layer.name}.bn.beta"] = np.zeros(cout, dtype)
            tensors[f"{layer.name}.bn.mean"] = np.zeros(cout, dtype)
            tensors[f"{layer.name}.bn.var"] = np.ones(cout, dtype)
        elif norm:
            tensors[f"{layer.name}.bntt.gamma"] = np.ones((timesteps, cout), dtype)
            tensors[f"{layer.name}.bntt.mean"] = np.zeros((timesteps, cout), dtype)
            tensors[f"{layer.name}.bntt.var"] = np.ones((timesteps, cout), dtype)
    if mode == "ann":
        out = spec.layer(spec.output if spec.layer(spec.output).weighted else _accumulator(spec))
        tensors[f"{out.name}.bias"] = np.zeros(out.synapses[0].conv.out_channels, dtype)
    return ModelParams(mode, tensors, leak, threshold)


def _accumulator(spec: NetworkSpec) -> str:
    return next(l.name for l in spec.layers if l.kind == "accumulator")


def build_spiking_deeplab(num_classes: int, input_dims=(3, 64, 64), *, width=1.0, dilation=2, mode="spiking", **kw):
    spec = deeplab_spec(num_classes, input_dims, width, dilation)
    return spec, init_params(spec, mode, **kw)


def build_spiking_fcn(num_classes: int, input_dims=(3, 64, 64), *, width=1.0, mode="spiking", **kw):
    spec = fcn_spec(num_classes, input_dims, width)
    return spec, init_params(spec, mode, **kw)


def build(arch: str, num_classes: int, input_dims, *, width=1.0, dilation=2, mode="spiking", **kw):
    if arch == "deeplab":
        return build_spiking_deeplab(num_classes, input_dims, width=width, dilation=dilation, mode=mode, **kw)
    if arch == "fcn":
        return build_spiking_fcn(num_classes, input_dims, width=width, mode=mode, **kw)
    raise ConfigurationError(f"unknown architecture {arch!r}")


def check_params(spec: NetworkSpec, params: ModelParams) -> None:
    for _, syn in spec.synapses():
        w = params.tensors.get(f"{syn.name}.weight")
        if w is None:
            raise ConfigurationError(f"missing weights for {syn.name}")
        if w.shape != syn.weight_shape:
            raise DimensionError(f"{syn.name}: weight shape {w.shape} != {syn.weight_shape}")


# -- normalisation -------------------------------------------------------------


def _bn_train(x, axes, eps):
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, mu, var, inv


def _bn_backward(dxhat, xhat, inv, axes):
    m = np.prod([dxhat.shape[a] for a in axes])
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return inv * (dxhat - s1 / m - xhat * s2 / m)


def _bntt_forward(x, bp: BnttParams, t0: int, training: bool, update: bool):
    """x: (T, n, C, H, W). Returns normalised currents and a backward cache."""
    T = x.shape[0]
    if t0 + T > bp.gamma.shape[0]:
        raise ValidationError(f"BNTT holds {bp.gamma.shape[0]} steps, asked for step {t0 + T - 1}")
    gamma = bp.gamma[t0 : t0 + T][:, None, :, None, None].astype(x.dtype, copy=False)
    if training:
        xhat, mu, var, inv = _bn_train(x, (1, 3, 4), bp.eps)
        if update:
            m = x.shape[1] * x.shape[3] * x.shape[4]
            unbiased = var[:, 0, :, 0, 0] * (m / max(m - 1, 1))
            sl = slice(t0, t0 + T)
            bp.running_mean[sl] = (1 - bp.momentum) * bp.running_mean[sl] + bp.momentum * mu[:, 0, :, 0, 0]
            bp.running_var[sl] = (1 - bp.momentum) * bp.running_var[sl] + bp.momentum * unbiased
    else:
        mu = bp.running_mean[t0 : t0 + T][:, None, :, None, None].astype(x.dtype, copy=False)
        var = bp.running_var[t0 : t0 + T][:, None, :, None, None].astype(x.dtype, copy=False)
        inv = 1.0 / np.sqrt(var + bp.eps)
        xhat = (x - mu) * inv
    return gamma * xhat, (xhat, inv, gamma, training)


def bntt_normalize(current: np.ndarray, params: BnttParams, t: int, training: bool) -> np.ndarray:
    """Normalise one step's currents (n, C, H, W) with the statistics of step ``t``.

    Training uses batch statistics over (n, H, W) and updates the running
    estimates of step ``t`` only. There is no additive shift.
    """
    tn.check_tensor4(current, "current")
    if not 0 <= t < params.gamma.shape[0]:
        raise ValidationError(f"time-step {t} outside [0, {params.gamma.shape[0]})")
    y, _ = _bntt_forward(current[None], params, t, training, update=training)
    return y[0]


# -- execution -----------------------------------------------------------------


@dataclass
class SpikeTrace:
    """Per-LIF-layer spike totals accumulated over all steps and samples."""

    layers: list[str]
    spikes: np.ndarray  # int64 per layer
    neurons: np.ndarray  # int64 per layer: neurons per sample x samples
    steps: int

    def __add__(self, other: "SpikeTrace") -> "SpikeTrace":
        if self.layers != other.layers or self.steps != other.steps:
            raise ValidationError("cannot merge traces of different networks or step counts")
        return SpikeTrace(self.layers, self.spikes + other.spikes, self.neurons + other.neurons, self.steps)


@dataclass
class ForwardCache:
    mode: str
    training: bool
    outs: dict[str, np.ndarray]
    membranes: dict[str, np.ndarray] = field(default_factory=dict)  # pre-reset u, (T, n, ...)
    norm: dict[str, tuple] = field(default_factory=dict)
    frames: int = 1
    frame_outs: dict[str, np.ndarray] | None = None  # per-frame outputs before averaging (ann)


def _flat(x):
    return x.reshape((-1,) + x.shape[2:])


def _synapse_current(syn: Synapse, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    lead = x.shape[:2]
    xf = _flat(x)
    if syn.transposed:
        y = tn.transpose_conv_forward(xf, w, syn.conv)
    else:
        y = tn.conv2d_forward(xf, w, syn.conv)
    return y.reshape(lead + y.shape[1:])


def _node_current(layer: LayerSpec, params: ModelParams, outs) -> np.ndarray:
    total = None
    for syn in layer.synapses:
        y = _synapse_current(syn, outs[syn.source], params.tensors[f"{syn.name}.weight"])
        total = y if total is None else total + y
    bias = params.tensors.get(f"{layer.name}.bias")
    if bias is not None:
        total = total + bias.reshape(1, 1, -1, 1, 1).astype(total.dtype, copy=False)
    return total


def _execute(
    spec: NetworkSpec,
    params: ModelParams,
    x: np.ndarray,
    *,
    training: bool,
    update_stats: bool,
    state: dict | None = None,
    t0: int = 0,
    keep: bool = True,
):
    """Run every node over all leading steps of ``x`` (T, n, C, H, W)."""
    mode = params.mode
    if x.ndim != 5:
        raise DimensionError(f"network input must be (T, n, C, H, W), got {x.shape}")
    if x.shape[2] != spec.in_channels:
        raise DimensionError(f"channel axis mismatch: input has {x.shape[2]}, network expects {spec.in_channels}")
    if tuple(x.shape[3:]) != tuple(spec.input_hw):
        spec.shapes(tuple(x.shape[3:]))  # raises if incompatible
    outs = {"input": x}
    cache = ForwardCache(mode, training, outs, frames=x.shape[0])
    counts = {}
    leak = params.leak
    feature_idx = spec.index(spec.feature_end)
    last_needed = _last_use(spec)
    for idx, layer in enumerate(spec.layers):
        if layer.kind == "avgpool":
            src = outs[layer.source]
            y = tn.avg_pool2(_flat(src))
            outs[layer.name] = y.reshape(src.shape[:2] + y.shape[1:])
        elif layer.kind == "bilinear":
            src = outs[layer.source]
            oh, ow = layer.out_hw or tuple(x.shape[3:])
            y = tn.bilinear_upsample(_flat(src), oh, ow)
            outs[layer.name] = y.reshape(src.shape[:2] + y.shape[1:])
        elif layer.kind == "accumulator":
            current = _node_current(layer, params, outs)
            acc = current.sum(axis=0, keepdims=True)
            if state is not None and layer.name in state:
                acc = acc + state[layer.name]
            if state is not None:
                state[layer.name] = acc
            outs[layer.name] = acc
        elif mode == "ann" and f"{layer.name}.bn.gamma" not in params.tensors:
            outs[layer.name] = np.maximum(_node_current(layer, params, outs), 0)
        elif mode == "ann":
            current = _node_current(layer, params, outs)
            t = params.tensors
            g, b = t[f"{layer.name}.bn.gamma"], t[f"{layer.name}.bn.beta"]
            if training:
                xhat, mu, var, inv = _bn_train(current, (0, 1, 3, 4), BN_EPS)
                if update_stats:
                    m = current.size // current.shape[2]
                    t[f"{layer.name}.bn.mean"][:] = (1 - BNTT_MOMENTUM) * t[f"{layer.name}.bn.mean"] + BNTT_MOMENTUM * mu.ravel()
                    t[f"{layer.name}.bn.var"][:] = (1 - BNTT_MOMENTUM) * t[f"{layer.name}.bn.var"] + BNTT_MOMENTUM * var.ravel() * (m / max(m - 1, 1))
            else:
                mu = t[f"{layer.name}.bn.mean"].reshape(1, 1, -1, 1, 1)
                inv = 1.0 / np.sqrt(t[f"{layer.name}.bn.var"].reshape(1, 1, -1, 1, 1) + BN_EPS)
                xhat = (current - mu) * inv
            gb = g.reshape(1, 1, -1, 1, 1)
            pre = (gb * xhat + b.reshape(1, 1, -1, 1, 1)).astype(current.dtype, copy=False)
            if keep:
                cache.norm[layer.name] = (xhat.astype(current.dtype, copy=False), inv, gb, training)
            outs[layer.name] = np.maximum(pre, 0)
        else:
            current = _node_current(layer, params, outs)
            bp = params.bntt(layer.name)
            if bp is not None:
                current, ncache = _bntt_forward(current, bp, t0, training, update_stats)
                if keep:
                    cache.norm[layer.name] = ncache
            theta = params.layer_threshold(layer.name, current.dtype)
            u = state.get(layer.name) if state is not None else None
            if u is None:
                u = np.zeros(current.shape[1:], dtype=current.dtype)
            out = np.empty_like(current)
            upre = np.empty_like(current) if keep else None
            for t in range(current.shape[0]):
                u = leak * u + current[t]
                if keep:
                    upre[t] = u
                o = relaxed_activation(u, theta) if mode == "relaxed" else fire(u, theta)
                out[t] = o
                u = u - o * theta
            if state is not None:
                state[layer.name] = u
            if keep:
                cache.membranes[layer.name] = upre
            outs[layer.name] = out
            counts[layer.name] = out.sum(dtype=np.float64)
        if mode == "ann" and idx == feature_idx and x.shape[0] > 1:
            # average frame embeddings once the feature extractor is done
            cache.frame_outs = dict(outs)
            for name in list(outs):
                if name != "input":
                    outs[name] = outs[name].mean(axis=0, keepdims=True)
        if not keep:
            for name in [n for n, last in last_needed.items() if last == idx and n in outs and n != spec.output]:
                del outs[name]
    return outs[spec.output][0], cache, counts


def _last_use(spec: NetworkSpec) -> dict[str, int]:
    last = {}
    for idx, layer in enumerate(spec.layers):
        for src in layer.sources:
            last[src] = idx
    return last


def _trace(spec: NetworkSpec, counts, n: int, steps: int) -> SpikeTrace:
    shapes = spec.shapes()
    names = spec.lif_layers
    spikes = np.array([int(round(counts.get(k, 0.0))) for k in names], dtype=np.int64)
    neurons = np.array([int(np.prod(shapes[k])) * n for k in names], dtype=np.int64)
    return SpikeTrace(names, spikes, neurons, steps)


def forward_spiking(
    spec: NetworkSpec,
    params: ModelParams,
    train: np.ndarray,
    *,
    training: bool = False,
    time_chunk: int | None = None,
    return_cache: bool = False,
):
    """Run a spike train (T, n, C, H, W) through the network.

    Hidden layers are LIF populations (BNTT on their input currents when the
    parameters carry it); the output node integrates its currents without leak
    or firing, and the logits are its final membrane. Returns
    ``(logits, trace)``, plus the backward cache if requested (this forces a
    single chunk).
    """
    if params.mode not in ("spiking", "relaxed"):
        raise ModeError(f"forward_spiking needs a spiking or relaxed model, got {params.mode!r}")
    check_params(spec, params)
    steps, n = train.shape[:2]
    if steps < 1:
        raise ValidationError("spike train has no time-steps")
    if return_cache or time_chunk is None or time_chunk >= steps:
        logits, cache, counts = _execute(
            spec, params, train, training=training, update_stats=training, keep=return_cache
        )
        trace = _trace(spec, counts, n, steps)
        return (logits, trace, cache) if return_cache else (logits, trace)
    state: dict = {}
    totals: dict[str, float] = {}
    for t0 in range(0, steps, time_chunk):
        logits, _, counts = _execute(
            spec,
            params,
            train[t0 : t0 + time_chunk],
            training=training,
            update_stats=training,
            state=state,
            t0=t0,
            keep=False,
        )
        for k, v in counts.items():
            totals[k] = totals.get(k, 0.0) + v
    return logits, _trace(spec, totals, n, steps)


def forward_ann(spec: NetworkSpec, params: ModelParams, x: np.ndarray, *, training: bool = False, return_cache=False):
    """ReLU + batch-norm execution of the same graph.

    ``x`` is an image batch (n, C, H, W) or a frame sequence (F, n, C, H, W);
    for sequences the feature-extractor outputs are averaged over frames
    before the classifier.
    """
    if params.mode != "ann":
        raise ModeError(f"forward_ann needs an ann model, got {params.mode!r}")
    check_params(spec, params)
    if x.ndim == 4:
        x = x[None]
    logits, cache, _ = _execute(spec, params, x, training=training, update_stats=training, keep=return_cache)
    return (logits, cache) if return_cache else logits


def predict(spec, params, x, *, time_chunk=None) -> np.ndarray:
    """Class map (n, H, W) by argmax over logits; ``x`` as for the matching forward."""
    if params.mode == "ann":
        logits = forward_ann(spec, params, x)
    else:
        logits, _ = forward_spiking(spec, params, x, time_chunk=time_chunk)
    return logits.argmax(axis=1)
