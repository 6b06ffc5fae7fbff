"""Per-layer FLOPs of both architectures, and energy from a measured trace.

Without a checkpoint the script prints the 64x64 FLOPs tables and the
energy ratio for a few uniform spike rates. With ``--checkpoint`` it runs the
model on synthetic eval scenes and reports measured spike rates.

    python3 scripts/energy_table.py
    python3 scripts/energy_table.py --checkpoint runs/deeplab/best.ckpt
"""

from __future__ import annotations

import argparse

from spikeseg import checkpoint, data, metrics, networks, training


def flops_tables(num_classes: int, size: int) -> None:
    for arch in ("deeplab", "fcn"):
        spec = networks.build(arch, num_classes, (3, size, size))[0]
        rows = metrics.flops(spec)
        print(f"# {arch} {size}x{size}, {num_classes} classes")
        print("synapse,flops")
        for r in rows:
            print(f"{r.name},{r.flops}")
        total = sum(r.flops for r in rows)
        print(f"total,{total}\n# E_ANN {total * metrics.E_MAC / 1e6:.1f} uJ")
        for rate in (0.1, 0.5, 1.0):
            rep = metrics.energy(spec, metrics.uniform_trace(spec, rate))
            print(f"# uniform R_s={rate}: E_ANN/E_SNN = {rep.ratio:.3f}")
        print()


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--classes", type=int, default=21)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--checkpoint")
    ap.add_argument("--timesteps", type=int, default=20)
    args = ap.parse_args()
    if not args.checkpoint:
        flops_tables(args.classes, args.size)
        return
    ck = checkpoint.load(args.checkpoint)
    size = ck.spec.input_hw[0]
    _, ev = data.synthesize(data.SyntheticSegSpec(image_size=size, num_classes=ck.spec.num_classes, channels=ck.spec.in_channels))
    traces: list = []
    training.evaluate(ck.spec, ck.params, ev, timesteps=args.timesteps, trace_out=traces)
    trace = traces[0]
    for t in traces[1:]:
        trace = trace + t
    print(metrics.energy(ck.spec, trace).to_csv(), end="")


if __name__ == "__main__":
    main()
