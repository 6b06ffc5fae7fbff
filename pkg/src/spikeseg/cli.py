"""``spikeseg`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad arguments,
invalid config, missing input files).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import conversion, data, encoding, metrics, networks, training
from .config import ExperimentConfig, parse_pairs
from .errors import ConfigurationError, FormatError, ModeError, SpikeSegError, ValidationError

log = logging.getLogger("spikeseg")

# short flags accepted in addition to --section.key
ALIASES = {
    "seed": "train.seed",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "batch": "train.batch_size",
    "timesteps": "train.timesteps",
    "arch": "model.arch",
    "mode": "model.mode",
    "width": "model.width",
    "data": "data.root",
    "classes": "data.num_classes",
}


class UsageError(Exception):
    pass


# -- config and data ------------------------------------------------------------


def _overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            value = next(it, None)
            if value is None:
                raise UsageError(f"--{key} needs a value")
        pairs.append((ALIASES.get(key, key), value))
    return pairs


def load_config(path: str | None, extra: list[str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    pairs = []
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} not found")
        pairs += parse_pairs(p.read_text())
    pairs += _overrides(extra)
    return cfg.update(pairs)


def _synthetic_spec(cfg: ExperimentConfig) -> data.SyntheticSegSpec:
    d = cfg.data
    return data.SyntheticSegSpec(
        image_size=d.image_size,
        num_classes=d.num_classes,
        shapes_per_image=(d.shapes_min, d.shapes_max),
        pixel_noise=d.pixel_noise,
        channels=d.channels,
        num_train=d.num_train,
        num_eval=d.num_eval,
        seed=d.seed,
    )


def datasets(cfg: ExperimentConfig, root: str | None = None):
    """(train, eval) from a dataset directory, or synthesised from the config."""
    root = root or cfg.data.root
    if root:
        if not (Path(root) / "manifest.txt").is_file():
            raise UsageError(f"dataset {root} not found (no manifest.txt)")
        return data.load_dataset(root, cfg.data.train_split), data.load_dataset(root, cfg.data.eval_split)
    spec = _synthetic_spec(cfg)
    if cfg.data.encoder == "dvs":
        (tr, _), (ev, _) = data.synthesize_events(spec, cfg.data.frames, cfg.data.window_us)
        return tr, ev
    return data.synthesize(spec)


def build_model(cfg: ExperimentConfig, ds: data.SegDataset):
    m = cfg.model
    dims = ds.input_dims if ds.kind == "static" else (2,) + ds.input_dims[1:]
    steps = cfg.train.timesteps if ds.kind == "static" else ds.inputs.shape[1]
    return networks.build(
        m.arch, ds.num_classes, dims, width=m.width, dilation=m.dilation, mode=m.mode,
        timesteps=steps, seed=m.init_seed, leak=m.leak, threshold=m.threshold,
    )


def _load_ckpt(path: str) -> ckpt_io.Checkpoint:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return ckpt_io.load(path)


def _check_classes(ck: ckpt_io.Checkpoint, ds: data.SegDataset) -> None:
    if ck.spec.num_classes != ds.num_classes:
        raise ValidationError(f"checkpoint predicts {ck.spec.num_classes} classes, dataset has {ds.num_classes}")


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {path} is not writable")
    return out


def _write(path: Path | str, text: str) -> None:
    data.atomic_write(path, text)


# -- commands -------------------------------------------------------------------------


def cmd_train(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    resolved = cfg.to_text()
    print("# resolved config")
    print(resolved, end="")
    _write(out / "config.txt", resolved)
    trn, ev = datasets(cfg)
    spec, params = build_model(cfg, trn)
    t = cfg.train
    tc = training.TrainConfig(
        timesteps=t.timesteps, batch_size=t.batch_size, epochs=t.epochs, lr=t.lr, lr_decay=t.lr_decay,
        milestone=t.milestone, seed=t.seed, grad_clip=t.grad_clip, target_miou=t.target_miou,
    )
    lines = [training.LOG_HEADER]
    log_path = out / "log.csv"

    def on_row(row):
        lines.append(row.csv())
        _write(log_path, "\n".join(lines) + "\n")
        print(f"epoch {row.epoch:3d} {row.split:5s} loss {row.loss:.4f} mIoU {row.miou:.4f} lr {row.lr:.2e}", flush=True)

    res = training.train(spec, params, trn, tc, eval_set=ev, on_row=on_row)
    meta = {"best_epoch": str(res.best_epoch), "best_miou": repr(res.best_miou)}
    ckpt_io.save(out / "best.ckpt", ckpt_io.Checkpoint(spec, res.best_params, None, meta))
    ckpt_io.save(out / "final.ckpt", ckpt_io.Checkpoint(spec, res.params, res.optim, meta))
    print(f"best eval mIoU {res.best_miou:.4f} at epoch {res.best_epoch}")
    return 0


def _overlay(label: np.ndarray, num_classes: int) -> np.ndarray:
    """Class map to grey levels spread over 0..255 (255 stays the ignore colour)."""
    step = 255 // max(num_classes - 1, 1)
    img = np.where(label == metrics.IGNORE_INDEX, 255, label.astype(np.int64) * step)
    return np.clip(img, 0, 255).astype(np.uint8)


def _to_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img


def _dump_overlays(directory: str, ds: data.SegDataset, preds: np.ndarray) -> None:
    out = _out_dir(directory)
    for i, sid in enumerate(ds.ids):
        if ds.kind == "static":
            x = ds.inputs[i]
            img = np.clip(np.rint(x * 255), 0, 255).astype(np.uint8)
            img = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
        else:
            counts = ds.inputs[i].sum(axis=(0, 1))
            img = np.clip(np.rint(counts / max(counts.max(), 1) * 255), 0, 255).astype(np.uint8)
        row = [_to_rgb(img), _to_rgb(_overlay(preds[i], ds.num_classes)), _to_rgb(_overlay(ds.labels[i], ds.num_classes))]
        data.write_pnm(out / f"{sid}.ppm", np.concatenate(row, axis=1))


def _predict_all(spec, params, ds, timesteps, seed, batch_size, time_chunk):
    preds = []
    for b, start in enumerate(range(0, len(ds), batch_size)):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x = training.prepare_input(ds, idx, params.mode, timesteps, training._rng(seed, 1, b))
        if params.mode == "ann":
            logits = networks.forward_ann(spec, params, x)
        else:
            logits, _ = networks.forward_spiking(spec, params, x, time_chunk=time_chunk)
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    ck = _load_ckpt(args.checkpoint)
    trn, ev = datasets(cfg)
    ds = trn if args.split == "train" else ev
    _check_classes(ck, ds)
    res = training.evaluate(
        ck.spec, ck.params, ds, timesteps=cfg.train.timesteps, seed=cfg.train.seed,
        batch_size=cfg.train.batch_size, time_chunk=cfg.eval.time_chunk,
    )
    print("class,iou")
    for c, v in enumerate(res.iou.per_class):
        print(f"{c},{'' if np.isnan(v) else f'{v:.4f}'}")
    print(f"mean,{res.iou.mean:.4f}")
    if args.dump_overlays:
        preds = _predict_all(ck.spec, ck.params, ds, cfg.train.timesteps, cfg.train.seed, cfg.train.batch_size, cfg.eval.time_chunk)
        _dump_overlays(args.dump_overlays, ds, preds)
    return 0


def cmd_profile(args, cfg: ExperimentConfig) -> int:
    ck = _load_ckpt(args.checkpoint)
    _, ev = datasets(cfg)
    _check_classes(ck, ev)
    if ck.params.mode == "ann":
        print("note: ann checkpoint, reporting ANN energy only", file=sys.stderr)
        rows = metrics.flops(ck.spec)
        total = sum(r.flops for r in rows)
        text = "layer,flops_ann\n" + "".join(f"{r.name},{r.flops}\n" for r in rows)
        text += f"total,{total}\nenergy_pj,{total * metrics.E_MAC!r}\n"
    else:
        traces: list = []
        training.evaluate(
            ck.spec, ck.params, ev, timesteps=cfg.train.timesteps, seed=cfg.train.seed,
            batch_size=cfg.train.batch_size, time_chunk=cfg.eval.time_chunk, trace_out=traces,
        )
        trace = traces[0]
        for t in traces[1:]:
            trace = trace + t
        text = metrics.energy(ck.spec, trace).to_csv()
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def cmd_convert(args, cfg: ExperimentConfig) -> int:
    ck = _load_ckpt(args.checkpoint)
    if ck.params.mode != "ann":
        raise ModeError(f"convert needs an ann checkpoint, got {ck.params.mode}")
    trn, _ = datasets(cfg)
    _check_classes(ck, trn)
    c = cfg.convert
    profile = conversion.calibrate(ck.spec, ck.params, trn, c.mode, c.percentile, max_samples=c.calib_samples)
    snn = conversion.convert(ck.spec, ck.params, profile)
    meta = {"converted_from": Path(args.checkpoint).name, "balance": c.mode, "percentile": repr(c.percentile)}
    ckpt_io.save(args.out, ckpt_io.Checkpoint(ck.spec, snn, None, meta))
    for name, s in profile.scales.items():
        print(f"{name} scale {np.array2string(np.atleast_1d(s), precision=4, max_line_width=10**6)}")
    return 0


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    ck = _load_ckpt(args.checkpoint)
    if ck.params.mode == "ann":
        raise ModeError("sweep needs a spiking checkpoint")
    _, ev = datasets(cfg)
    _check_classes(ck, ev)
    curve = conversion.sweep_timesteps(
        ck.spec, ck.params, ev, cfg.eval.sweep_steps, seed=cfg.train.seed,
        batch_size=cfg.train.batch_size, time_chunk=cfg.eval.time_chunk,
    )
    text = conversion.sweep_csv(curve)
    if args.ann:
        ann = _load_ckpt(args.ann)
        print(f"# ann reference mIoU {conversion.ann_reference(ann.spec, ann.params, ev):.4f}")
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def cmd_robustness(args, cfg: ExperimentConfig) -> int:
    models = {}
    for item in args.model:
        label, eq, path = item.partition("=")
        if not eq:
            raise UsageError(f"--model expects label=path, got {item!r}")
        ck = _load_ckpt(path)
        models[label] = (ck.spec, ck.params)
    _, ev = datasets(cfg)
    for spec, _ in models.values():
        if spec.num_classes != ev.num_classes:
            raise ValidationError("checkpoint and dataset class counts differ")
    rows = metrics.robustness_sweep(
        models, ev, cfg.eval.sigmas, cfg.train.seed, timesteps=cfg.train.timesteps, batch_size=cfg.train.batch_size
    )
    text = metrics.robustness_csv(rows)
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    spec = _synthetic_spec(cfg)
    if cfg.data.encoder == "dvs":
        (tr, s_tr), (ev, s_ev) = data.synthesize_events(spec, cfg.data.frames, cfg.data.window_us)
        data.save_dataset(out, {"train": tr, "eval": ev}, cfg.data.window_us, {**s_tr, **s_ev})
    else:
        tr, ev = data.synthesize(spec)
        data.save_dataset(out, {"train": tr, "eval": ev})
    print(f"wrote {len(tr)} train and {len(ev)} eval samples to {out}")
    return 0


def cmd_encode(args, cfg: ExperimentConfig) -> int:
    out = _out_dir(args.out)
    if args.events:
        stream = encoding.read_events(args.events)
        frames = encoding.dvs_accumulate(stream, args.window_us, args.frames)[:, 0]  # (F, 2, H, W)
        for f, fr in enumerate(frames):
            for p, name in enumerate(("off", "on")):
                img = np.clip(fr[p] * (255 // max(fr.max(), 1)), 0, 255).astype(np.uint8)
                data.write_pnm(out / f"frame{f:03d}_{name}.pgm", img)
        print(f"wrote {len(frames)} frames")
        return 0
    if not args.image:
        raise UsageError("encode needs --image or --events")
    img = data.read_pnm(args.image).astype(np.float32) / 255.0
    x = img[None, None] if img.ndim == 2 else img.transpose(2, 0, 1)[None]
    train = encoding.poisson_encode(x, args.steps, cfg.train.seed)
    for t in range(args.steps):
        frame = train[t, 0]
        frame = frame[0] if frame.shape[0] == 1 else frame.transpose(1, 2, 0)
        data.write_pnm(out / f"step{t:04d}.{'pgm' if frame.ndim == 2 else 'ppm'}", (frame * 255).astype(np.uint8))
    print(f"wrote {args.steps} spike frames")
    return 0


# -- entry point -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikeseg", description="Spiking segmentation networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="config file of 'section.key = value' lines")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--out", required=True, help="run directory")
    sp = add("eval", cmd_eval, "mIoU of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=("train", "eval"), default="eval")
    sp.add_argument("--dump-overlays", metavar="DIR")
    sp = add("profile", cmd_profile, "spike rates and energy report")
    sp.add_argument("checkpoint")
    sp.add_argument("--out")
    sp = add("convert", cmd_convert, "ANN to SNN threshold balancing")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp = add("sweep", cmd_sweep, "mIoU over time-steps")
    sp.add_argument("checkpoint")
    sp.add_argument("--ann", help="source ANN checkpoint for the reference line")
    sp.add_argument("--out")
    sp = add("robustness", cmd_robustness, "mIoU drop under input noise")
    sp.add_argument("--model", action="append", required=True, metavar="LABEL=CKPT")
    sp.add_argument("--out")
    sp = add("synth", cmd_synth, "write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp = add("encode", cmd_encode, "dump encoder frames")
    sp.add_argument("--out", required=True)
    sp.add_argument("--image")
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--events")
    sp.add_argument("--window-us", type=int, default=50_000)
    sp.add_argument("--frames", type=int)
    return p


def _thread_limit():
    raw = os.environ.get("SPIKESEG_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPIKESEG_THREADS must be an integer, got {raw!r}") from None
    try:
        import torch

        torch.set_num_threads(n)
    except ImportError:
        pass
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl not installed; SPIKESEG_THREADS only applies to torch")
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, extra)
        with _thread_limit():
            return args.fn(args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpikeSegError, OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
