"""Surrogate-gradient BPTT, spatial cross-entropy, Adam and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as tn
from .data import SegDataset
from .encoding import poisson_encode
from .errors import ConfigurationError, NumericalError, StateError, ValidationError
from .metrics import IGNORE_INDEX, IouResult, confusion_matrix, iou_from_confusion
from .networks import ForwardCache, ModelParams, NetworkSpec, forward_ann, forward_spiking
from .neuron import surrogate_grad

log = logging.getLogger(__name__)


# -- loss ------------------------------------------------------------------------


class LossValue(NamedTuple):
    loss: float
    pixel_loss: np.ndarray  # (n, H, W); zero at ignored pixels
    count: int  # normaliser N: number of non-ignored pixels


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _check_labels(logits, labels, ignore_index):
    tn.check_tensor4(logits, "logits")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValidationError(f"labels shape {labels.shape} != {(n, h, w)}")
    valid = labels != ignore_index
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ValidationError(f"label values must lie in [0, {c}) or equal {ignore_index}")
    return valid


def spatial_cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> LossValue:
    return cross_entropy_with_grad(logits, labels, ignore_index)[0]


def cross_entropy_with_grad(logits, labels, ignore_index: int = IGNORE_INDEX) -> tuple[LossValue, np.ndarray]:
    """Per-pixel softmax cross-entropy, averaged over non-ignored pixels, and d(loss)/d(logits)."""
    labels = np.asarray(labels)
    valid = _check_labels(logits, labels, ignore_index)
    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pixel = np.where(valid, -picked, 0).astype(logits.dtype)
    count = int(valid.sum())
    loss = float(pixel.sum(dtype=np.float64) / count) if count else 0.0
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1, axis=1)
    grad *= valid[:, None]
    if count:
        grad /= count
    return LossValue(loss, pixel, count), grad.astype(logits.dtype, copy=False)


# -- backward --------------------------------------------------------------------


def _synapses_backward(layer, params, store, g_current, grads, add):
    """Push current gradients (T, n, C, H, W) into weights, bias and source outputs."""
    key = f"{layer.name}.bias"
    if key in grads:
        grads[key] += g_current.sum(axis=(0, 1, 3, 4))
    gf = g_current.reshape((-1,) + g_current.shape[2:])
    for syn in layer.synapses:
        x = store[syn.source]
        xf = x.reshape((-1,) + x.shape[2:])
        w = params.tensors[f"{syn.name}.weight"]
        wkey = f"{syn.name}.weight"
        if syn.transposed:
            gx, gw = tn.transpose_conv_backward(xf, w, gf, syn.conv)
            if wkey in grads:
                grads[wkey] += gw
        else:
            if wkey in grads:
                grads[wkey] += tn.conv2d_grad_weight(xf, gf, syn.conv)
            gx = None if syn.source == "input" else tn.conv2d_grad_input(w, gf, syn.conv, xf.shape[2:])
        if syn.source != "input":
            add(syn.source, gx.reshape(x.shape))


def _accumulator_backward(layer, params, store, g_logit, grads, add):
    """Output node: logits = sum_t I_t, so every step receives the same gradient."""
    steps = store[layer.synapses[0].source].shape[0]
    key = f"{layer.name}.bias"
    if key in grads:
        grads[key] += steps * g_logit.sum(axis=(0, 1, 3, 4))
    gf = g_logit.reshape((-1,) + g_logit.shape[2:])
    for syn in layer.synapses:
        x = store[syn.source]
        w = params.tensors[f"{syn.name}.weight"]
        xsum = x.sum(axis=0)  # linear in x: sum over steps first
        if syn.transposed:
            gx, gw = tn.transpose_conv_backward(xsum, w, gf, syn.conv)
        else:
            gw = tn.conv2d_grad_weight(xsum, gf, syn.conv)
            gx = None if syn.source == "input" else tn.conv2d_grad_input(w, gf, syn.conv, xsum.shape[2:])
        wkey = f"{syn.name}.weight"
        if wkey in grads:
            grads[wkey] += gw
        if syn.source != "input":
            add(syn.source, np.broadcast_to(gx[None], x.shape))


def bptt_backward(
    spec: NetworkSpec, params: ModelParams, cache: ForwardCache | None, grad_logits: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of every trainable tensor given d(loss)/d(logits).

    Hidden LIF layers run the spatio-temporal recursion backwards in time::

        dL/du_pre[t] = lam * dL/du_pre[t+1] * (1 - theta * s[t]) + dL/do[t] * s[t]

    with ``s`` the piecewise-linear surrogate, i.e. the soft-reset path is
    differentiated through the spike. The output accumulator is handled exactly.
    """
    if cache is None or (cache.mode != "ann" and not cache.membranes and spec.lif_layers):
        raise StateError("bptt_backward needs the cache of a forward pass run with return_cache=True")
    t = params.tensors
    grads = {k: np.zeros_like(t[k]) for k in params.trainable()}
    g: dict[str, np.ndarray] = {}

    def add(name, val):
        if name == "input":
            return
        g[name] = val if name not in g else g[name] + val

    add(spec.output, grad_logits[None])
    feature_idx = spec.index(spec.feature_end)
    averaged = cache.frame_outs is not None
    leak = params.leak
    for idx in reversed(range(len(spec.layers))):
        layer = spec.layers[idx]
        if averaged and idx == feature_idx:
            frames = cache.frames
            for name in list(g):
                g[name] = np.broadcast_to(g[name], (frames,) + g[name].shape[1:]) / frames
        store = cache.frame_outs if averaged and idx <= feature_idx else cache.outs
        gy = g.pop(layer.name, None)
        if gy is None:
            continue
        if layer.kind == "avgpool":
            gx = tn.avg_pool2_backward(gy.reshape((-1,) + gy.shape[2:]))
            add(layer.source, gx.reshape(gy.shape[:2] + gx.shape[1:]))
        elif layer.kind == "bilinear":
            src = store[layer.source]
            gx = tn.bilinear_upsample_backward(gy.reshape((-1,) + gy.shape[2:]), *src.shape[3:])
            add(layer.source, gx.reshape(gy.shape[:2] + gx.shape[1:]))
        elif layer.kind == "accumulator":
            _accumulator_backward(layer, params, store, gy, grads, add)
        elif cache.mode == "ann":
            out = store[layer.name]
            gi = gpre = gy * (out > 0)
            if layer.name in cache.norm:
                xhat, inv, gb, training = cache.norm[layer.name]
                grads[f"{layer.name}.bn.gamma"] += (gpre * xhat).sum(axis=(0, 1, 3, 4))
                grads[f"{layer.name}.bn.beta"] += gpre.sum(axis=(0, 1, 3, 4))
                gi = _bn_input_grad(gpre * gb, xhat, inv, (0, 1, 3, 4), training)
            _synapses_backward(layer, params, store, gi, grads, add)
        else:
            upre = cache.membranes[layer.name]
            theta = params.layer_threshold(layer.name, upre.dtype)
            gy = np.broadcast_to(gy, upre.shape)
            gi = np.empty_like(upre)
            carry = np.zeros(upre.shape[1:], dtype=upre.dtype)
            for step in reversed(range(upre.shape[0])):
                s = surrogate_grad(upre[step], theta)
                carry = leak * carry * (1 - theta * s) + gy[step] * s
                gi[step] = carry
            if layer.name in cache.norm:
                xhat, inv, gamma, training = cache.norm[layer.name]
                gkey = f"{layer.name}.bntt.gamma"
                if gkey in grads:
                    grads[gkey][: upre.shape[0]] += (gi * xhat).sum(axis=(1, 3, 4))
                gi = _bn_input_grad(gi * gamma, xhat, inv, (1, 3, 4), training)
            _synapses_backward(layer, params, store, gi, grads, add)
    return grads


def _bn_input_grad(dxhat, xhat, inv, axes, training):
    if not training:
        return dxhat * inv
    m = np.prod([dxhat.shape[a] for a in axes])
    s1 = dxhat.sum(axis=axes, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
    return (inv * (dxhat - s1 / m - xhat * s2 / m)).astype(dxhat.dtype, copy=False)


def forward_with_cache(spec, params, inputs, training=True):
    if params.mode == "ann":
        logits, cache = forward_ann(spec, params, inputs, training=training, return_cache=True)
        return logits, None, cache
    return forward_spiking(spec, params, inputs, training=training, return_cache=True)


def loss_and_grads(spec, params, inputs, labels, ignore_index=IGNORE_INDEX, training=True):
    """One forward/backward pass. Returns ``(LossValue, grads, logits, trace)``."""
    logits, trace, cache = forward_with_cache(spec, params, inputs, training)
    value, g = cross_entropy_with_grad(logits, labels, ignore_index)
    return value, bptt_backward(spec, params, cache, g), logits, trace


# -- optimiser -------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 10.0
    milestone: float = 0.5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")

    def lr_at(self, epoch: int, epochs: int) -> float:
        """Step schedule: base lr through the milestone epoch, divided by ``decay`` after."""
        return self.lr if epoch <= int(self.milestone * epochs) else self.lr / self.decay


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimState, lr: float | None = None) -> None:
    """Bias-corrected Adam, in place."""
    keys = params.trainable()
    if set(grads) != set(keys):
        raise ValidationError(f"gradient keys differ from parameters: {sorted(set(grads) ^ set(keys))}")
    for k in keys:
        if not np.all(np.isfinite(grads[k])):
            raise NumericalError(f"non-finite gradient in {k}")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for k in keys:
        p, g = params.tensors[k], grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- data plumbing ---------------------------------------------------------------


def prepare_input(dataset: SegDataset, index, mode: str, timesteps: int, rng, noise: np.ndarray | None = None):
    """Network input for samples ``index``: Poisson train, event frames, or raw images."""
    x = dataset.inputs[index]
    if noise is not None:
        x = x + noise
        if dataset.kind == "static":
            x = np.clip(x, 0.0, 1.0)
    x = x.astype(np.float32, copy=False)
    if dataset.kind == "dvs":
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4))  # (F, n, 2, H, W)
    if mode == "ann":
        return x
    return poisson_encode(x, timesteps, rng)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


class EvalResult(NamedTuple):
    loss: float
    iou: IouResult
    confusion: np.ndarray


def evaluate(
    spec,
    params,
    dataset: SegDataset,
    *,
    timesteps: int = 20,
    seed: int = 0,
    batch_size: int = 16,
    noise_sigma: float = 0.0,
    time_chunk: int | None = None,
    trace_out: list | None = None,
) -> EvalResult:
    """Loss and mIoU over ``dataset`` in inference mode (deterministic given seed)."""
    if len(dataset) == 0:
        raise ConfigurationError("empty dataset")
    conf = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    total, count = 0.0, 0
    noise_rng = _rng(seed, 0x5EED)
    noise_all = noise_rng.standard_normal(dataset.inputs.shape).astype(np.float32) if noise_sigma > 0 else None
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        noise = noise_sigma * noise_all[idx] if noise_all is not None else None
        x = prepare_input(dataset, idx, params.mode, timesteps, _rng(seed, 1, b), noise)
        if params.mode == "ann":
            logits = forward_ann(spec, params, x)
        else:
            logits, trace = forward_spiking(spec, params, x, time_chunk=time_chunk)
            if trace_out is not None:
                trace_out.append(trace)
        value = spatial_cross_entropy(logits, dataset.labels[idx])
        total += value.loss * value.count
        count += value.count
        conf += confusion_matrix(logits.argmax(axis=1), dataset.labels[idx], dataset.num_classes)
    return EvalResult(total / max(count, 1), iou_from_confusion(conf), conf)


# -- epoch loop --------------------------------------------------------------------


@dataclass
class TrainConfig:
    timesteps: int = 20
    batch_size: int = 16
    epochs: int = 60
    lr: float = 3e-3
    lr_decay: float = 10.0
    milestone: float = 0.5
    seed: int = 0
    grad_clip: float = 0.0
    target_miou: float = 0.0  # stop once eval mIoU reaches this (0 = never)
    log_wall_time: bool = False


class LogRow(NamedTuple):
    epoch: int
    split: str
    loss: float
    miou: float
    lr: float
    wall_ms: int

    def csv(self) -> str:
        return f"{self.epoch},{self.split},{self.loss!r},{self.miou!r},{self.lr!r},{self.wall_ms}"


LOG_HEADER = "epoch,split,loss,miou,lr,wall_ms"


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    best_miou: float
    best_epoch: int
    log: list[LogRow]
    optim: OptimState


def train(
    spec: NetworkSpec,
    params: ModelParams,
    dataset: SegDataset,
    config: TrainConfig,
    eval_set: SegDataset | None = None,
    on_row: Callable[[LogRow], None] | None = None,
) -> TrainResult:
    """Mini-batch training: encode, run T steps, loss on the output membrane, BPTT, Adam.

    Event datasets bypass the Poisson encoder and feed their frames directly.
    ``params`` is updated in place.
    """
    if len(dataset) == 0:
        raise ConfigurationError("empty training set")
    if dataset.num_classes != spec.num_classes:
        raise ValidationError(f"dataset has {dataset.num_classes} classes, network {spec.num_classes}")
    if params.mode != "ann" and dataset.kind == "static":
        steps = params.bntt_steps()
        if steps is not None and steps < config.timesteps:
            raise ConfigurationError(f"BNTT sized for {steps} steps, config asks for {config.timesteps}")
    optim = OptimState(lr=config.lr, decay=config.lr_decay, milestone=config.milestone)
    rows: list[LogRow] = []
    best = (-1.0, 0, params.copy())
    for epoch in range(1, config.epochs + 1):
        t_start = time.perf_counter()
        lr = optim.lr_at(epoch, config.epochs)
        order = _rng(config.seed, epoch).permutation(len(dataset))
        conf = np.zeros((dataset.num_classes,) * 2, dtype=np.int64)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = np.sort(order[start : start + config.batch_size])
            x = prepare_input(dataset, idx, params.mode, config.timesteps, _rng(config.seed, epoch, b, 7))
            value, grads, logits, _ = loss_and_grads(spec, params, x, dataset.labels[idx])
            if config.grad_clip > 0:
                clip_grads(grads, config.grad_clip)
            adam_step(params, grads, optim, lr)
            total += value.loss * value.count
            count += value.count
            conf += confusion_matrix(logits.argmax(axis=1), dataset.labels[idx], dataset.num_classes)
        wall = int((time.perf_counter() - t_start) * 1000) if config.log_wall_time else 0
        row = LogRow(epoch, "train", total / max(count, 1), iou_from_confusion(conf).mean, lr, wall)
        rows.append(row)
        if on_row:
            on_row(row)
        score = row.miou
        if eval_set is not None:
            t_eval = time.perf_counter()
            ev = evaluate(spec, params, eval_set, timesteps=config.timesteps, seed=config.seed, batch_size=config.batch_size)
            wall = int((time.perf_counter() - t_eval) * 1000) if config.log_wall_time else 0
            row = LogRow(epoch, "eval", ev.loss, ev.iou.mean, lr, wall)
            rows.append(row)
            if on_row:
                on_row(row)
            score = ev.iou.mean
        if score > best[0]:
            best = (score, epoch, params.copy())
        if config.target_miou and score >= config.target_miou:
            log.info("target mIoU %.3f reached at epoch %d", config.target_miou, epoch)
            break
    return TrainResult(params, best[2], best[0], best[1], rows, optim)
