"""Random tiny networks and the finite-difference oracle for BPTT gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spikeseg import networks as nw
from spikeseg import training as tr


@dataclass
class TinyInstance:
    spec: nw.NetworkSpec
    params: nw.ModelParams
    inputs: np.ndarray
    labels: np.ndarray


def tiny_instance(seed: int, steps: int = 4, size: int = 8, mode: str = "relaxed") -> TinyInstance:
    """2-3 weighted layers on an 8x8 input, drawn at random from ``seed``."""
    rng = np.random.default_rng(seed)
    cin = int(rng.integers(1, 3))
    classes = int(rng.integers(2, 4))
    hidden = int(rng.integers(1, 3))
    lines = ["network tiny", f"input {cin} {size} {size}", f"classes {classes}"]
    body, src, ch, pooled = [], "input", cin, False
    for i in range(hidden):
        out = int(rng.integers(2, 4))
        r = int(rng.integers(1, 3))
        body += [f"lif h{i}", f"  {'dilated' if r > 1 else 'conv'} h{i} src={src} in={ch} out={out} k=3 s=1 p={r} r={r}"]
        src, ch = f"h{i}", out
        if not pooled and rng.random() < 0.5:
            body.append(f"avgpool p{i} src={src}")
            src, pooled = f"p{i}", True
    lines.append(f"features {src}")
    body += ["accumulator cls", f"  classifier cls src={src} in={ch} out={classes} k=1 s=1 p=0 r=1"]
    if pooled:
        body.append(f"bilinear head src=cls size={size}x{size}")
    spec = nw.NetworkSpec.from_text("\n".join(lines + body) + "\n")
    params = nw.init_params(
        spec, mode, timesteps=steps, seed=seed, leak=float(rng.uniform(0.8, 1.0)),
        threshold=float(rng.uniform(0.5, 1.5)), norm=bool(rng.random() < 0.7), dtype=np.float64,
    )
    for k, v in params.tensors.items():
        if k.endswith(".weight"):
            v *= 2.5  # push membranes into the surrogate's support
        elif k.endswith(".bntt.gamma"):
            v[:] = rng.uniform(0.5, 1.5, size=v.shape)
    inputs = rng.uniform(size=(steps, 2, cin, size, size))
    labels = rng.integers(0, classes, size=(2, size, size)).astype(np.uint8)
    labels[0, 0, :3] = 255  # a few ignored pixels
    return TinyInstance(spec, params, inputs, labels)


def loss_at(inst: TinyInstance) -> float:
    logits, _, _ = tr.forward_with_cache(inst.spec, inst.params, inst.inputs, training=True)
    return tr.spatial_cross_entropy(logits, inst.labels).loss


def gradient_check(inst: TinyInstance, eps: float = 1e-6) -> tuple[float, int]:
    """Max elementwise relative error of BPTT against central differences.

    The denominator is floored at 1e-6 times the largest gradient magnitude,
    so entries that are numerically zero are judged on absolute error.
    """
    _, grads, _, _ = tr.loss_and_grads(inst.spec, inst.params, inst.inputs, inst.labels)
    scale = max(float(np.abs(g).max()) for g in grads.values())
    worst, checked = 0.0, 0
    for key, g in grads.items():
        p = inst.params.tensors[key].reshape(-1)
        ga = g.reshape(-1)
        for i in range(p.size):
            old = p[i]
            p[i] = old + eps
            hi = loss_at(inst)
            p[i] = old - eps
            lo = loss_at(inst)
            p[i] = old
            fd = (hi - lo) / (2 * eps)
            err = abs(fd - ga[i]) / max(abs(fd), abs(ga[i]), 1e-6 * scale)
            worst = max(worst, err)
            checked += 1
    return worst, checked


# -- acceptance verdicts ----------------------------------------------------------

VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record and print one PASS/FAIL line, then fail the calling test if needed."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" [{detail}]" if detail else "")
    VERDICTS.append(line)
    print(line)
    assert ok, line
