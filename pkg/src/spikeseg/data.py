"""Datasets: portable-pixmap I/O, on-disk layout, synthetic shape scenes.

On-disk layout::

    manifest.txt        header lines then one "<split> <id>" line per sample
    images/NNNN.pgm     8-bit grayscale (or images/NNNN.ppm, RGB)
    events/NNNN.txt     event-stream samples instead of images (kind dvs)
    labels/NNNN.pgm     class index per pixel, 255 = ignore
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import EventStream, dvs_accumulate, read_events, write_events
from .errors import FormatError, ValidationError

MANIFEST_MAGIC = "spikeseg-dataset 1"


# -- PNM -------------------------------------------------------------------------


def write_pnm(path: str | Path, pixels: np.ndarray) -> None:
    """Write uint8 (H, W) as P5 or (H, W, 3) as P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValidationError("PNM payload must be uint8")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValidationError(f"unsupported pixmap shape {pixels.shape}")
    h, w = pixels.shape[:2]
    atomic_write(path, magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only 8-bit binary P5/P6 supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    path = Path(path)
    if isinstance(payload, str):
        payload = payload.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- dataset ---------------------------------------------------------------------


@dataclass
class SegDataset:
    """In-memory samples.

    ``inputs`` is (N, C, H, W) float32 in [0, 1] for static images, or
    (N, F, 2, H, W) frame counts for event data.
    """

    inputs: np.ndarray
    labels: np.ndarray  # (N, H, W) uint8
    num_classes: int
    kind: str = "static"
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValidationError("inputs and labels differ in length")
        if self.kind not in ("static", "dvs"):
            raise ValidationError(f"unknown dataset kind {self.kind!r}")
        if not self.ids:
            self.ids = [f"{i:04d}" for i in range(len(self))]

    def __len__(self):
        return len(self.labels)

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return tuple(self.inputs.shape[-3:])

    def subset(self, index) -> "SegDataset":
        index = np.asarray(index)
        return SegDataset(self.inputs[index], self.labels[index], self.num_classes, self.kind, [self.ids[i] for i in index])


def load_dataset(root: str | Path, split: str) -> SegDataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{root}: no manifest.txt")
    header, ids = _read_manifest(manifest, split)
    kind = header.get("kind", "static")
    num_classes = int(header["num_classes"])
    if not ids:
        raise ValidationError(f"{root}: split {split!r} is empty")
    inputs, labels = [], []
    for sid in ids:
        labels.append(read_pnm(root / "labels" / f"{sid}.pgm"))
        if kind == "dvs":
            stream = read_events(root / "events" / f"{sid}.txt")
            frames = dvs_accumulate(stream, int(header["window_us"]), int(header["frames"]))
            inputs.append(frames[:, 0])
        else:
            path = root / "images" / f"{sid}.pgm"
            if not path.exists():
                path = path.with_suffix(".ppm")
            img = read_pnm(path).astype(np.float32) / 255.0
            inputs.append(img[None] if img.ndim == 2 else img.transpose(2, 0, 1))
    return SegDataset(np.stack(inputs), np.stack(labels), num_classes, kind, ids)


def _read_manifest(path: Path, split: str | None):
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise FormatError(f"{path}: bad manifest header")
    header, ids = {}, []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            continue
        if parts[0] in ("train", "eval"):
            if split is None or parts[0] == split:
                ids.append(parts[1])
        else:
            header[parts[0]] = parts[1]
    return header, ids


def read_manifest_header(root: str | Path) -> dict[str, str]:
    return _read_manifest(Path(root) / "manifest.txt", None)[0]


def save_dataset(root: str | Path, splits: dict[str, SegDataset], window_us: int = 50_000, streams=None) -> None:
    """Write splits to ``root``. ``streams`` (id -> EventStream) is required for dvs data."""
    root = Path(root)
    first = next(iter(splits.values()))
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / ("events" if first.kind == "dvs" else "images")).mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_MAGIC, f"kind {first.kind}", f"num_classes {first.num_classes}"]
    c, h, w = first.input_dims
    lines += [f"height {h}", f"width {w}", f"channels {c}"]
    if first.kind == "dvs":
        lines += [f"window_us {window_us}", f"frames {first.inputs.shape[1]}"]
    for split, ds in splits.items():
        for i, sid in enumerate(ds.ids):
            lines.append(f"{split} {sid}")
            write_pnm(root / "labels" / f"{sid}.pgm", ds.labels[i].astype(np.uint8))
            if ds.kind == "dvs":
                write_events(streams[sid], root / "events" / f"{sid}.txt")
            else:
                img = np.clip(np.rint(ds.inputs[i] * 255.0), 0, 255).astype(np.uint8)
                if img.shape[0] == 1:
                    write_pnm(root / "images" / f"{sid}.pgm", img[0])
                else:
                    write_pnm(root / "images" / f"{sid}.ppm", img.transpose(1, 2, 0))
    atomic_write(root / "manifest.txt", "\n".join(lines) + "\n")


# -- synthetic scenes ------------------------------------------------------------

SHAPES = ("rectangle", "disk", "triangle")


@dataclass(frozen=True)
class SyntheticSegSpec:
    """Scenes of random rectangles / disks / triangles on a darker background.

    Class k >= 1 is shape ``SHAPES[k-1]``. Each class draws its fill intensity
    from its own range; ranges may overlap so shape matters, not only brightness.
    """

    image_size: int = 32
    num_classes: int = 3
    shapes_per_image: tuple[int, int] = (1, 3)
    background: tuple[float, float] = (0.0, 0.3)
    foreground: tuple[tuple[float, float], ...] = ((0.45, 0.8), (0.65, 1.0), (0.55, 0.9))
    pixel_noise: float = 0.05
    size_range: tuple[float, float] = (0.25, 0.5)
    channels: int = 1
    num_train: int = 400
    num_eval: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SHAPES) + 1:
            raise ValidationError(f"num_classes must be in [2, {len(SHAPES) + 1}]")
        if len(self.foreground) < self.num_classes - 1:
            raise ValidationError("need one foreground intensity range per shape class")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")


def _shape_mask(kind: str, size: int, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    extent = rng.uniform(lo, hi) * size
    cy, cx = rng.uniform(extent / 2, size - extent / 2, size=2)
    if kind == "rectangle":
        hh, ww = extent / 2, rng.uniform(0.6, 1.0) * extent / 2
        if rng.random() < 0.5:
            hh, ww = ww, hh
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= ww)
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= (extent / 2) ** 2
    # upward triangle with apex at the top
    top, bottom = cy - extent / 2, cy + extent / 2
    frac = np.clip((yy - top) / max(bottom - top, 1e-9), 0, 1)
    half = frac * extent / 2
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def render_scene(spec: SyntheticSegSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    img = np.full((spec.channels, s, s), rng.uniform(*spec.background), dtype=np.float64)
    label = np.zeros((s, s), dtype=np.uint8)
    for _ in range(int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))):
        cls = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask(SHAPES[cls - 1], s, rng, *spec.size_range)
        lo, hi = spec.foreground[cls - 1]
        img[:, mask] = rng.uniform(lo, hi, size=(spec.channels, 1))
        label[mask] = cls
    img += rng.normal(0, spec.pixel_noise, size=img.shape)
    return np.clip(img, 0, 1).astype(np.float32), label


def _split(spec: SyntheticSegSpec, count: int, seed_seq: np.random.SeedSequence, offset: int, require_all: bool):
    attempt = 0
    while True:
        rng = np.random.default_rng(seed_seq.spawn(1)[0] if attempt else seed_seq)
        scenes = [render_scene(spec, rng) for _ in range(count)]
        labels = np.stack([s[1] for s in scenes]) if scenes else np.zeros((0, spec.image_size, spec.image_size), np.uint8)
        present = set(np.unique(labels).tolist())
        if not require_all or count == 0 or all(c in present for c in range(1, spec.num_classes)):
            break
        attempt += 1  # reject the whole split and redraw
    images = np.stack([s[0] for s in scenes]) if scenes else np.zeros((0, spec.channels, spec.image_size, spec.image_size), np.float32)
    ids = [f"{offset + i:04d}" for i in range(count)]
    return SegDataset(images, labels, spec.num_classes, "static", ids)


def synthesize(spec: SyntheticSegSpec) -> tuple[SegDataset, SegDataset]:
    """Deterministic (train, eval) splits; every shape class occurs in train."""
    root = np.random.SeedSequence(spec.seed)
    train_seq, eval_seq = root.spawn(2)
    train = _split(spec, spec.num_train, train_seq, 0, require_all=True)
    evals = _split(spec, spec.num_eval, eval_seq, spec.num_train, require_all=False)
    return train, evals


# -- synthetic event streams -------------------------------------------------------


def synthesize_events(
    spec: SyntheticSegSpec, frames: int = 8, window_us: int = 50_000, substeps: int = 4, contrast: float = 0.15
):
    """Moving-shape scenes observed by an idealised DVS.

    Shapes translate with a constant per-scene velocity; an event is emitted
    wherever log intensity changes by more than ``contrast`` between substeps.
    Labels mark shape positions at the end of the recording.
    """
    root = np.random.SeedSequence(spec.seed)
    out = []
    for split_seq, count, offset in zip(root.spawn(2), (spec.num_train, spec.num_eval), (0, spec.num_train)):
        rng = np.random.default_rng(split_seq)
        inputs, labels, streams, ids = [], [], {}, []
        for i in range(count):
            sid = f"{offset + i:04d}"
            stream, label = _moving_scene(spec, rng, frames, window_us, substeps, contrast)
            inputs.append(dvs_accumulate(stream, window_us, frames)[:, 0])
            labels.append(label)
            streams[sid] = stream
            ids.append(sid)
        s = spec.image_size
        ds = SegDataset(
            np.stack(inputs) if inputs else np.zeros((0, frames, 2, s, s), np.float32),
            np.stack(labels) if labels else np.zeros((0, s, s), np.uint8),
            spec.num_classes,
            "dvs",
            ids,
        )
        out.append((ds, streams))
    return out[0], out[1]


def _moving_scene(spec, rng, frames, window_us, substeps, contrast):
    s = spec.image_size
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    objs = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask(SHAPES[cls - 1], s, rng, *spec.size_range)
        lo, hi = spec.foreground[cls - 1]
        objs.append((cls, mask, rng.uniform(lo, hi), rng.uniform(-1.5, 1.5, size=2)))
    bg = rng.uniform(*spec.background)
    total = frames * substeps

    def render(k):
        img = np.full((s, s), bg)
        lab = np.zeros((s, s), np.uint8)
        for cls, mask, val, vel in objs:
            dy, dx = np.rint(vel * k / substeps).astype(int)
            m = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
            img[m] = val
            lab[m] = cls
        return img, lab

    events = []
    prev, _ = render(0)
    dt = window_us // substeps
    for k in range(1, total + 1):
        cur, lab = render(k)
        diff = np.log(cur + 0.1) - np.log(prev + 0.1)
        ys, xs = np.nonzero(np.abs(diff) > contrast)
        t = (k - 1) * dt + rng.integers(0, dt, size=len(ys))
        pol = np.where(diff[ys, xs] > 0, 1, -1)
        events.append(np.stack([t, xs, ys, pol], axis=1))
        prev = cur
    ev = np.concatenate(events) if events else np.zeros((0, 4), np.int64)
    ev = ev[np.argsort(ev[:, 0], kind="stable")]
    return EventStream(ev, s, s), lab
