"""Relative mIoU drop under Gaussian input noise, spiking vs ReLU network.

Both models are trained from scratch on the synthetic scenes with the same
seed, then evaluated on shared noise draws.

    python3 scripts/robustness.py --epochs 15 --sigmas 0.1 0.2 0.3 0.4
"""

from __future__ import annotations

import argparse

from spikeseg import data, metrics, networks, training


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--arch", default="deeplab", choices=("deeplab", "fcn"))
    ap.add_argument("--width", type=float, default=0.125)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigmas", nargs="+", type=float, default=[0.1, 0.2, 0.3, 0.4])
    args = ap.parse_args()

    trn, ev = data.synthesize(data.SyntheticSegSpec(seed=args.seed))
    cfg = training.TrainConfig(epochs=args.epochs, seed=args.seed)
    models = {}
    for mode in ("spiking", "ann"):
        spec, params = networks.build(args.arch, trn.num_classes, trn.input_dims, width=args.width, mode=mode, seed=args.seed)
        res = training.train(spec, params, trn, cfg, eval_set=ev)
        print(f"# {mode}: best eval mIoU {res.best_miou:.4f}", flush=True)
        models["snn" if mode == "spiking" else "ann"] = (spec, res.best_params)
    rows = metrics.robustness_sweep(models, ev, args.sigmas, args.seed)
    print(metrics.robustness_csv(rows), end="")


if __name__ == "__main__":
    main()
