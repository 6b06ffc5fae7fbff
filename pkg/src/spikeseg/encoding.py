"""Input encoders: Poisson rate coding for static images, time binning for DVS events.

Spike trains are arrays of shape ``(T, n, c, h, w)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)


def poisson_encode(
    image: np.ndarray,
    steps: int,
    seed: int | np.random.Generator,
    i_min: float = 0.0,
    i_max: float = 1.0,
) -> np.ndarray:
    """Rate-code ``image`` (n, c, h, w) into ``steps`` binary frames.

    At each step a fresh uniform draw in ``[i_min, i_max)`` is compared with
    every pixel; the pixel spikes iff the draw is strictly below it, so the
    expected rate is ``(x - i_min) / (i_max - i_min)``.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if not i_max > i_min:
        raise ValidationError("i_max must exceed i_min")
    image = np.asarray(image)
    if image.size and (image.min() < i_min or image.max() > i_max):
        raise ValidationError(
            f"pixel values must lie in [{i_min}, {i_max}], got [{image.min()}, {image.max()}]"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    draws = rng.uniform(i_min, i_max, size=(steps,) + image.shape)
    return (draws < image[None]).astype(np.float32)


@dataclass
class EventStream:
    """DVS events as an (N, 4) int64 array of ``(t_us, x, y, polarity)`` rows."""

    events: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64).reshape(-1, 4)
        self.events = ev
        if len(ev) == 0:
            return
        t, x, y, p = ev.T
        if np.any(np.diff(t) < 0):
            raise ValidationError("event timestamps must be nondecreasing")
        if np.any((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)):
            raise ValidationError("event coordinates outside the sensor")
        if np.any((p != 1) & (p != -1)):
            raise ValidationError("polarity must be +1 or -1")

    def __len__(self):
        return len(self.events)


def dvs_accumulate(stream: EventStream, window_us: int, num_frames: int | None = None) -> np.ndarray:
    """Bin events into two-channel count frames of shape ``(F, 1, 2, H, W)``.

    Frame ``f`` holds events with ``f*window <= t < (f+1)*window``; channel 0
    counts positive events, channel 1 negative ones. By default enough frames
    are emitted to hold every event. With ``num_frames`` set, later events are
    dropped.
    """
    if window_us <= 0:
        raise ValidationError(f"window must be positive, got {window_us}")
    ev = stream.events
    if num_frames is None:
        if len(ev) == 0:
            log.warning("empty event stream: returning zero frames")
            return np.zeros((0, 1, 2, stream.height, stream.width), dtype=np.float32)
        num_frames = int(ev[-1, 0] // window_us) + 1
    frames = np.zeros((num_frames, 2, stream.height, stream.width), dtype=np.float32)
    if len(ev):
        t, x, y, p = ev.T
        f = t // window_us
        keep = (f >= 0) & (f < num_frames)
        ch = np.where(p > 0, 0, 1)
        np.add.at(frames, (f[keep], ch[keep], y[keep], x[keep]), 1.0)
    return frames[:, None]


def read_events(path: str | Path) -> EventStream:
    """Parse the plain-text event format: header ``H W``, then ``t x y p`` lines."""
    lines = Path(path).read_text().split("\n")
    try:
        height, width = (int(v) for v in lines[0].split())
        rows = [ln.split() for ln in lines[1:] if ln.strip()]
        events = np.array([[int(v) for v in r] for r in rows], dtype=np.int64).reshape(-1, 4)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed event file ({exc})") from None
    return EventStream(events, height, width)


def write_events(stream: EventStream, path: str | Path) -> None:
    out = [f"{stream.height} {stream.width}"]
    out.extend(f"{t} {x} {y} {p}" for t, x, y, p in stream.events.tolist())
    Path(path).write_text("\n".join(out) + "\n")
