"""Train a ReLU network on synthetic scenes, convert it to IF neurons, sweep T.

Prints one CSV block per balancing mode plus the source network's mIoU.

    python3 scripts/conversion_sweep.py --epochs 20 --steps 8 32 128 512
"""

from __future__ import annotations

import argparse
import time

from spikeseg import conversion, data, networks, training


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="deeplab", choices=("deeplab", "fcn"))
    ap.add_argument("--width", type=float, default=0.125)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--percentile", type=float, default=conversion.DEFAULT_PERCENTILE)
    ap.add_argument("--modes", nargs="+", default=list(conversion.BALANCE_MODES))
    ap.add_argument("--steps", nargs="+", type=int, default=[8, 32, 128, 512])
    ap.add_argument("--no-norm", action="store_true", help="train the ReLU net without batch norm")
    args = ap.parse_args()

    trn, ev = data.synthesize(data.SyntheticSegSpec(seed=args.seed))
    spec, ann = networks.build(
        args.arch, trn.num_classes, trn.input_dims, width=args.width, mode="ann", seed=args.seed, norm=not args.no_norm
    )
    t0 = time.perf_counter()
    res = training.train(spec, ann, trn, training.TrainConfig(epochs=args.epochs, seed=args.seed), eval_set=ev)
    ann = res.best_params
    print(f"# ann trained in {time.perf_counter() - t0:.0f}s, best epoch {res.best_epoch}")
    print(f"# ann reference mIoU {conversion.ann_reference(spec, ann, ev):.4f}")
    for mode in args.modes:
        profile = conversion.calibrate(spec, ann, trn, mode, args.percentile, max_samples=64)
        snn = conversion.convert(spec, ann, profile)
        t0 = time.perf_counter()
        curve = conversion.sweep_timesteps(spec, snn, ev, args.steps, seed=args.seed)
        print(f"# {mode} ({time.perf_counter() - t0:.0f}s)")
        print(conversion.sweep_csv(curve), end="", flush=True)


if __name__ == "__main__":
    main()
