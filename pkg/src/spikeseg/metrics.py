"""Segmentation accuracy, spike-rate profiling, FLOPs/energy model, noise robustness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as tn
from .errors import ConfigurationError, ValidationError
from .networks import NetworkSpec, SpikeTrace

# 45nm CMOS, 32-bit floating point (picojoules)
E_MULT = 3.7
E_ADD = 0.9
E_MAC = 4.6  # E_MULT + E_ADD, written out so products stay exact
E_AC = 0.9

IGNORE_INDEX = 255


# -- mIoU ------------------------------------------------------------------------


class IouResult(NamedTuple):
    per_class: np.ndarray  # nan where the class is absent from both maps
    mean: float


def confusion_matrix(pred, label, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """(num_classes, num_classes) counts, rows = label, cols = prediction."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValidationError(f"prediction shape {pred.shape} != label shape {label.shape}")
    keep = label != ignore_index
    lab = label[keep].astype(np.int64)
    prd = pred[keep].astype(np.int64)
    if lab.size and (lab.max() >= num_classes or lab.min() < 0):
        raise ValidationError(f"label values outside [0, {num_classes})")
    if prd.size and (prd.max() >= num_classes or prd.min() < 0):
        raise ValidationError(f"prediction values outside [0, {num_classes})")
    return np.bincount(lab * num_classes + prd, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> IouResult:
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    present = ~np.isnan(iou)
    mean = float(iou[present].mean()) if present.any() else float("nan")
    return IouResult(iou, mean)


def miou(pred, label, num_classes: int, ignore_index: int = IGNORE_INDEX) -> IouResult:
    """Per-class TP/(TP+FP+FN); classes absent from both maps are left out of the mean."""
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    return iou_from_confusion(confusion_matrix(pred, label, num_classes, ignore_index))


def background_baseline(label, num_classes: int, ignore_index: int = IGNORE_INDEX) -> float:
    """mIoU of predicting class 0 everywhere."""
    return miou(np.zeros_like(label), label, num_classes, ignore_index).mean


# -- spike rate / FLOPs / energy ---------------------------------------------------


def spike_rate(trace: SpikeTrace) -> np.ndarray:
    """Spikes per neuron over all steps, one value per LIF layer (ranges over [0, T])."""
    neurons = np.asarray(trace.neurons, dtype=np.float64)
    if np.any(neurons <= 0):
        raise ValidationError("neuron counts must be positive")
    return np.asarray(trace.spikes, dtype=np.float64) / neurons


@dataclass(frozen=True)
class FlopsRow:
    name: str  # synapse name
    layer: str  # node it feeds
    flops: int


def flops(spec: NetworkSpec, input_hw: tuple[int, int] | None = None) -> list[FlopsRow]:
    """MAC count of every synapse: k^2 * O^2 * C_in * C_out.

    Transposed convolutions count as a dense conv over the up-scattered input,
    so O is the output size. Pooling, interpolation and normalisation are free.
    """
    try:
        shapes = spec.shapes(input_hw)
    except ConfigurationError:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        raise ConfigurationError(f"cannot resolve shapes: {exc}") from None
    rows = []
    for layer, syn in spec.synapses():
        _, oh, ow = shapes[layer.name]
        c = syn.conv
        rows.append(FlopsRow(syn.name, layer.name, c.kernel**2 * oh * ow * c.in_channels * c.out_channels))
    return rows


def linear_flops(c_in: int, c_out: int) -> int:
    return c_in * c_out


@dataclass
class EnergyReport:
    names: list[str]
    flops_ann: list[int]
    spike_rates: list[float]
    flops_snn: list[float]
    e_mult: float = E_MULT
    e_add: float = E_ADD
    e_mac: float = E_MAC
    e_ac: float = E_AC

    @property
    def total_flops_ann(self) -> int:
        return int(sum(self.flops_ann))

    @property
    def total_flops_snn(self) -> float:
        return float(math.fsum(self.flops_snn))

    @property
    def e_ann(self) -> float:
        return self.total_flops_ann * self.e_mac

    @property
    def e_snn(self) -> float:
        return self.total_flops_snn * self.e_ac

    @property
    def ratio(self) -> float:
        return self.e_ann / self.e_snn if self.e_snn > 0 else float("inf")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "flops_ann", "spike_rate", "flops_snn"])
        for row in zip(self.names, self.flops_ann, self.spike_rates, self.flops_snn):
            w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])
        w.writerow(["total", self.total_flops_ann, "", repr(self.total_flops_snn)])
        w.writerow(["energy_pj", repr(self.e_ann), "", repr(self.e_snn)])
        w.writerow(["ratio", "", "", repr(self.ratio)])
        return buf.getvalue()


def synapse_rates(spec: NetworkSpec, trace: SpikeTrace) -> dict[str, float]:
    """Spike rate attached to each synapse row of the energy report.

    Synapses feeding a LIF population take that population's rate. Synapses
    feeding the non-firing output accumulator take the rate of the LIF layer
    they read from (through any pooling); reading the encoder directly gives 0.
    """
    if len(trace.layers) != len(spec.lif_layers) or list(trace.layers) != spec.lif_layers:
        raise ValidationError(f"trace layers {trace.layers} do not match network {spec.lif_layers}")
    rates = dict(zip(trace.layers, spike_rate(trace)))

    def upstream(name: str) -> float:
        while name != "input":
            layer = spec.layer(name)
            if layer.kind == "lif":
                return rates[name]
            if layer.weighted:
                return 0.0
            name = layer.source
        return 0.0

    out = {}
    for layer, syn in spec.synapses():
        out[syn.name] = rates[layer.name] if layer.kind == "lif" else upstream(syn.source)
    return out


def energy(spec: NetworkSpec, trace: SpikeTrace, input_hw=None) -> EnergyReport:
    rows = flops(spec, input_hw)
    rates = synapse_rates(spec, trace)
    names = [r.name for r in rows]
    f_ann = [r.flops for r in rows]
    r_s = [float(rates[n]) for n in names]
    f_snn = [f * r for f, r in zip(f_ann, r_s)]
    return EnergyReport(names, f_ann, r_s, f_snn)


def uniform_trace(spec: NetworkSpec, rate: float, steps: int = 20, samples: int = 1) -> SpikeTrace:
    """Synthetic trace where every LIF layer has spike rate ``rate``."""
    shapes = spec.shapes()
    neurons = np.array([int(np.prod(shapes[n])) * samples for n in spec.lif_layers], dtype=np.int64)
    spikes = np.round(neurons * rate).astype(np.int64)
    return SpikeTrace(spec.lif_layers, spikes, neurons, steps)


# -- robustness -----------------------------------------------------------------


def relative_drop(clean_miou: float, noise_miou: float) -> float:
    """(clean - noisy) / clean * 100, or nan when clean mIoU is zero."""
    if clean_miou == 0 or math.isnan(clean_miou):
        return float("nan")
    return (clean_miou - noise_miou) / clean_miou * 100.0


@dataclass(frozen=True)
class RobustnessRow:
    sigma: float
    model: str
    clean_miou: float
    noise_miou: float
    drop_pct: float


def robustness_csv(rows: list[RobustnessRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sigma", "model", "clean_miou", "noise_miou", "drop_pct"])
    for r in rows:
        drop = "" if math.isnan(r.drop_pct) else repr(r.drop_pct)
        w.writerow([repr(r.sigma), r.model, repr(r.clean_miou), repr(r.noise_miou), drop])
    return buf.getvalue()


def robustness_sweep(models: dict, dataset, sigmas, seed: int = 0, *, timesteps: int = 20, batch_size: int = 16):
    """Relative mIoU drop under additive Gaussian input noise for each model.

    ``models`` maps a label to ``(spec, params)``. For static images the noise
    is added to pixel intensities before Poisson encoding (then clipped to the
    valid range); for event data it is added to the frame counts. All sigmas
    share one standard-normal draw scaled by sigma, so curves are smooth in
    sigma. The sigma = 0 anchor is always evaluated.
    """
    from .training import evaluate  # local: training imports this module

    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ValidationError("sigmas must be nonnegative")
    if 0.0 not in sigmas:
        sigmas = [0.0] + sigmas
    rows = []
    for label, (spec, params) in models.items():
        clean = evaluate(spec, params, dataset, timesteps=timesteps, seed=seed, batch_size=batch_size).iou.mean
        for s in sigmas:
            noisy = (
                clean
                if s == 0
                else evaluate(
                    spec, params, dataset, timesteps=timesteps, seed=seed, batch_size=batch_size, noise_sigma=s
                ).iou.mean
            )
            rows.append(RobustnessRow(s, label, clean, noisy, relative_drop(clean, noisy)))
    return rows
