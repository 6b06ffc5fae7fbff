"""Threshold balancing of a trained ReLU network into an integrate-and-fire network.

A converted model keeps the (batch-norm folded) ANN weights, runs with leak 1
and soft reset, and drops BNTT. Scales are measured per layer or per output
channel from post-ReLU activations on calibration images and then compensated
layer by layer: a neuron whose ANN activation is ``a`` should fire at rate
``a / scale``.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ModeError, ValidationError
from .networks import BN_EPS, ModelParams, NetworkSpec, check_params, forward_ann
from .training import evaluate

log = logging.getLogger(__name__)

BALANCE_MODES = ("layerwise", "channelwise")
DEFAULT_PERCENTILE = 99.7


@dataclass
class BalanceProfile:
    mode: str
    scales: dict[str, np.ndarray]  # layer -> shape () for layerwise, (C,) for channelwise
    percentile: float
    samples: int
    channels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in BALANCE_MODES:
            raise ConfigurationError(f"unknown balance mode {self.mode!r}")
        for name, s in self.scales.items():
            s = np.asarray(s, dtype=np.float64)
            if not np.all(np.isfinite(s)) or np.any(s <= 0):
                raise ValidationError(f"scale of {name} must be positive and finite")
            if self.mode == "channelwise":
                if s.ndim != 1 or (name in self.channels and s.shape[0] != self.channels[name]):
                    raise ValidationError(f"{name}: channel scale vector has shape {s.shape}")
            elif s.ndim != 0:
                raise ValidationError(f"{name}: layerwise scale must be a scalar")
            self.scales[name] = s


def _images(data, max_samples: int | None) -> np.ndarray:
    kind = getattr(data, "kind", "static")
    if kind != "static":
        raise ConfigurationError("conversion needs static images; event streams are not supported")
    x = np.asarray(getattr(data, "inputs", data), dtype=np.float32)
    if x.ndim != 4:
        raise ValidationError(f"calibration images must be (n, C, H, W), got {x.shape}")
    if max_samples is not None:
        x = x[:max_samples]
    if len(x) == 0:
        raise ValidationError("no calibration samples")
    return x


def calibrate(
    spec: NetworkSpec,
    ann: ModelParams,
    calib_data,
    mode: str = "layerwise",
    percentile: float = DEFAULT_PERCENTILE,
    *,
    batch_size: int = 16,
    max_samples: int | None = None,
) -> BalanceProfile:
    """Activation scale of every ReLU layer over the calibration images.

    The scale is the given percentile of post-ReLU values (over everything in
    layerwise mode, over (n, H, W) per channel in channelwise mode), floored
    at 1 so layers that already stay inside the unit range keep their
    threshold. A layer that never activates gets scale 1 and a warning.
    """
    if ann.mode != "ann":
        raise ModeError(f"calibration needs an ann model, got {ann.mode!r}")
    if mode not in BALANCE_MODES:
        raise ConfigurationError(f"unknown balance mode {mode!r}")
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must be in (0, 100], got {percentile}")
    check_params(spec, ann)
    x = _images(calib_data, max_samples)
    acts: dict[str, list[np.ndarray]] = {name: [] for name in spec.lif_layers}
    for start in range(0, len(x), batch_size):
        _, cache = forward_ann(spec, ann, x[start : start + batch_size], return_cache=True)
        for name in acts:
            a = cache.outs[name][0]  # (n, C, H, W)
            acts[name].append(a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1))
    scales, channels = {}, {}
    for name, chunks in acts.items():
        a = np.concatenate(chunks, axis=1).astype(np.float64)
        channels[name] = a.shape[0]
        if not a.any():
            log.warning("layer %s never activates on the calibration data; using scale 1", name)
        if mode == "layerwise":
            s = np.percentile(a, percentile) if a.size else 0.0
        else:
            s = np.percentile(a, percentile, axis=1)
        scales[name] = np.maximum(np.asarray(s, dtype=np.float64), 1.0)
    return BalanceProfile(mode, scales, float(percentile), len(x), channels)


def fold_batchnorm(spec: NetworkSpec, ann: ModelParams) -> dict[str, np.ndarray]:
    """Weights and biases with inference batch norm folded in (no-op for BN-free layers)."""
    t = ann.tensors
    out = {}
    for layer in spec.layers:
        if not layer.weighted:
            continue
        bias = t.get(f"{layer.name}.bias")
        if f"{layer.name}.bn.gamma" not in t:
            for syn in layer.synapses:
                out[f"{syn.name}.weight"] = t[f"{syn.name}.weight"].copy()
            if bias is not None:
                out[f"{layer.name}.bias"] = bias.copy()
            continue
        gamma = t[f"{layer.name}.bn.gamma"].astype(np.float64)
        inv = 1.0 / np.sqrt(t[f"{layer.name}.bn.var"].astype(np.float64) + BN_EPS)
        scale = gamma * inv
        dtype = t[f"{layer.synapses[0].name}.weight"].dtype
        for syn in layer.synapses:
            w = t[f"{syn.name}.weight"].astype(np.float64)
            axis = 1 if syn.transposed else 0  # output-channel axis
            shape = [1, 1, 1, 1]
            shape[axis] = -1
            out[f"{syn.name}.weight"] = (w * scale.reshape(shape)).astype(dtype)
        b = t[f"{layer.name}.bn.beta"].astype(np.float64) - scale * t[f"{layer.name}.bn.mean"].astype(np.float64)
        if bias is not None:
            b = b + scale * bias.astype(np.float64)
        out[f"{layer.name}.bias"] = b.astype(dtype)
    return out


def _source_scale(spec: NetworkSpec, profile: BalanceProfile, name: str) -> np.ndarray:
    while name != "input":
        layer = spec.layer(name)
        if layer.kind == "lif":
            return profile.scales[name]
        if layer.weighted:
            raise ConfigurationError(f"{name} cannot feed another weighted layer")
        name = layer.source
    return np.asarray(1.0)


def convert(
    spec: NetworkSpec, ann: ModelParams, profile: BalanceProfile, mode: str | None = None
) -> ModelParams:
    """Integrate-and-fire model (leak 1, soft reset, no BNTT) from a trained ANN.

    Layerwise: a layer reading a source of scale ``rho`` keeps its weights,
    divides its bias by ``rho`` and fires at ``scale / rho``. Extra inputs with
    a different source scale (skip connections) are rescaled relative to
    ``rho``. Channelwise: input channels are weighted by their source channel
    scale and each output channel fires at its own scale.
    """
    if ann.mode != "ann":
        raise ModeError(f"conversion needs an ann model, got {ann.mode!r}")
    if mode is not None and mode != profile.mode:
        raise ConfigurationError(f"profile was calibrated {profile.mode}, asked to convert {mode}")
    missing = set(spec.lif_layers) - set(profile.scales)
    if missing:
        raise ConfigurationError(f"profile lacks scales for {sorted(missing)}")
    folded = fold_batchnorm(spec, ann)
    tensors: dict[str, np.ndarray] = {}
    for layer in spec.layers:
        if not layer.weighted:
            continue
        first = layer.synapses[0]
        dtype = folded[f"{first.name}.weight"].dtype
        bias = folded.get(f"{layer.name}.bias")
        if profile.mode == "layerwise":
            rho = float(_source_scale(spec, profile, first.source))
            for syn in layer.synapses:
                w = folded[f"{syn.name}.weight"]
                sigma = float(_source_scale(spec, profile, syn.source))
                tensors[f"{syn.name}.weight"] = w if sigma == rho else (w * (sigma / rho)).astype(dtype)
            if bias is not None:
                tensors[f"{layer.name}.bias"] = bias if rho == 1.0 else (bias / rho).astype(dtype)
            if layer.kind == "lif":
                cout = first.conv.out_channels
                theta = float(profile.scales[layer.name]) / rho
                tensors[f"{layer.name}.threshold"] = np.full(cout, theta, dtype=dtype)
        else:
            for syn in layer.synapses:
                w = folded[f"{syn.name}.weight"]
                s = np.broadcast_to(_source_scale(spec, profile, syn.source), (syn.conv.in_channels,))
                if np.all(s == 1.0):
                    tensors[f"{syn.name}.weight"] = w
                    continue
                axis = 0 if syn.transposed else 1  # input-channel axis
                shape = [1, 1, 1, 1]
                shape[axis] = -1
                tensors[f"{syn.name}.weight"] = (w * s.reshape(shape)).astype(dtype)
            if bias is not None:
                tensors[f"{layer.name}.bias"] = bias
            if layer.kind == "lif":
                tensors[f"{layer.name}.threshold"] = profile.scales[layer.name].astype(dtype)
    return ModelParams("spiking", tensors, leak=1.0, threshold=1.0)


# -- time-step sweep ---------------------------------------------------------------


def sweep_timesteps(
    spec: NetworkSpec,
    params: ModelParams,
    dataset,
    steps_list,
    *,
    seed: int = 0,
    batch_size: int = 16,
    time_chunk: int | None = 32,
) -> list[tuple[int, float]]:
    """Eval mIoU of a spiking model at each requested number of time-steps."""
    steps = [int(s) for s in steps_list]
    if not steps:
        raise ValidationError("empty time-step list")
    if any(s < 1 for s in steps):
        raise ValidationError(f"time-steps must be >= 1, got {steps}")
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValidationError(f"time-steps must be strictly ascending, got {steps}")
    if params.bntt_steps() is not None and params.bntt_steps() < steps[-1]:
        raise ConfigurationError(f"BNTT holds {params.bntt_steps()} steps, sweep asks for {steps[-1]}")
    curve = []
    for T in steps:
        res = evaluate(spec, params, dataset, timesteps=T, seed=seed, batch_size=batch_size, time_chunk=time_chunk)
        log.info("T=%d mIoU=%.4f", T, res.iou.mean)
        curve.append((T, res.iou.mean))
    return curve


def sweep_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timesteps", "miou"])
    for T, m in curve:
        w.writerow([T, repr(float(m))])
    return buf.getvalue()


def ann_reference(spec: NetworkSpec, ann: ModelParams, dataset, *, batch_size: int = 16) -> float:
    """mIoU of the source ANN, the horizontal reference of a sweep."""
    return evaluate(spec, ann, dataset, batch_size=batch_size).iou.mean
