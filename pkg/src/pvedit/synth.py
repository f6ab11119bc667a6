"""Procedural moving-shape videos with exact masks, prompts and proxy metrics."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Purpose, RngStream, atomic_write_bytes, save_tensor
from .errors import EmptyMaskError, ShapeMismatchError, SpecError

SHAPES = ("square", "circle", "triangle")
COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.2),
}
BACKGROUNDS = {
    "black": (0.08, 0.08, 0.1),
    "white": (0.92, 0.92, 0.9),
    "violet": (0.5, 0.2, 0.5),
}
DOT_COLOR = (0.1, 0.9, 0.9)
EXTRAS = ("none", "dot")
MOTIONS = ("static", "drift-right", "drift-down")

# prompt slots; token 0 is the unconditional (null) token
SLOTS = ("shape", "color", "background", "extra", "motion")
_SLOT_VALUES = {
    "shape": SHAPES,
    "color": tuple(COLORS),
    "background": tuple(BACKGROUNDS),
    "extra": EXTRAS,
    "motion": MOTIONS,
}
NULL_TOKEN = 0
_TOKEN_OF: dict[tuple[str, str], int] = {}
_VALUE_OF: dict[int, tuple[str, str]] = {}
for _slot in SLOTS:
    for _value in _SLOT_VALUES[_slot]:
        _tok = len(_TOKEN_OF) + 1
        _TOKEN_OF[(_slot, _value)] = _tok
        _VALUE_OF[_tok] = (_slot, _value)
VOCAB_SIZE = len(_TOKEN_OF) + 1
PROMPT_LEN = len(SLOTS)
NULL_PROMPT = (NULL_TOKEN,) * PROMPT_LEN

SHAPE_SIZE = 10
DOT_RADIUS = 2
DRIFT_SPEED = 2


@dataclass(frozen=True)
class SceneSpec:
    shape: str = "square"
    color: str = "red"
    background: str = "black"
    extra: str = "none"
    motion: str = "static"
    frames: int = 8
    height: int = 32
    width: int = 32
    # top-left of the shape's bounding box at frame 0 and the dot centre;
    # None means "draw from the stream"
    origin: tuple | None = None
    dot: tuple | None = None

    def validate(self) -> None:
        for slot in SLOTS:
            if getattr(self, slot) not in _SLOT_VALUES[slot]:
                raise SpecError(f"{slot}={getattr(self, slot)!r} not in {_SLOT_VALUES[slot]}")
        if self.frames < 1:
            raise SpecError("need at least one frame")
        if SHAPE_SIZE > min(self.height, self.width):
            raise SpecError(f"shape of size {SHAPE_SIZE} does not fit a {self.height}x{self.width} frame")

    def attributes(self) -> dict:
        return {slot: getattr(self, slot) for slot in SLOTS}

    def with_attributes(self, **changes) -> "SceneSpec":
        return dataclasses.replace(self, **changes)


@dataclass
class LabeledVideo:
    video: np.ndarray
    prompt: tuple
    masks: dict          # slot -> bool (F, H, W)
    spec: SceneSpec


def encode_prompt(spec: SceneSpec) -> tuple:
    return tuple(_TOKEN_OF[(slot, getattr(spec, slot))] for slot in SLOTS)


def decode_prompt(tokens, base: SceneSpec | None = None) -> SceneSpec:
    """Inverse of :func:`encode_prompt`; geometry fields come from ``base``."""
    base = base or SceneSpec()
    attrs = {}
    for slot, tok in zip(SLOTS, tokens):
        got_slot, value = _VALUE_OF[int(tok)]
        if got_slot != slot:
            raise SpecError(f"token {tok} encodes slot {got_slot!r}, expected {slot!r}")
        attrs[slot] = value
    return dataclasses.replace(base, **attrs)


def _shape_mask(kind: str, top: int, left: int, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    s = SHAPE_SIZE
    if kind == "square":
        return (yy >= top) & (yy < top + s) & (xx >= left) & (xx < left + s)
    if kind == "circle":
        r = s / 2.0
        cy, cx = top + r - 0.5, left + r - 0.5
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # isosceles triangle, apex up; half-width grows linearly with the row
    row = yy - top
    inside_rows = (row >= 0) & (row < s)
    half = (row + 1) * (s / 2.0) / s
    cx = left + s / 2.0 - 0.5
    return inside_rows & (np.abs(xx - cx) <= half)


def _positions(spec: SceneSpec, stream: RngStream | None) -> tuple[tuple, tuple]:
    origin, dot = spec.origin, spec.dot
    if origin is None or dot is None:
        if stream is None:
            raise SpecError("scene geometry not fixed and no random stream given")
        u = stream.uniform(4)
        if origin is None:
            origin = (int(u[0] * (spec.height - SHAPE_SIZE + 1)), int(u[1] * (spec.width - SHAPE_SIZE + 1)))
        if dot is None:
            lo = DOT_RADIUS
            dot = (lo + int(u[2] * (spec.height - 2 * lo)), lo + int(u[3] * (spec.width - 2 * lo)))
    return tuple(int(x) for x in origin), tuple(int(x) for x in dot)


def shape_track(spec: SceneSpec, origin: tuple) -> list[tuple[int, int]]:
    """Top-left corner per frame; drifting shapes stop at the frame border."""
    top, left = origin
    out = []
    for f in range(spec.frames):
        dy = DRIFT_SPEED * f if spec.motion == "drift-down" else 0
        dx = DRIFT_SPEED * f if spec.motion == "drift-right" else 0
        out.append((min(top + dy, spec.height - SHAPE_SIZE), min(left + dx, spec.width - SHAPE_SIZE)))
    return out


def gen_video(spec: SceneSpec, stream: RngStream | None = None) -> LabeledVideo:
    """Hard-edged raster of the scene: background, then the dot, then the shape on top."""
    spec.validate()
    origin, dot = _positions(spec, stream)
    spec = dataclasses.replace(spec, origin=origin, dot=dot)
    F, H, W = spec.frames, spec.height, spec.width
    video = np.empty((F, H, W, 3), dtype=np.float32)
    video[...] = np.asarray(BACKGROUNDS[spec.background], dtype=np.float32)
    yy, xx = np.mgrid[0:H, 0:W]
    dot_geom = ((yy - dot[0]) ** 2 + (xx - dot[1]) ** 2 <= DOT_RADIUS ** 2) if spec.extra == "dot" else np.zeros((H, W), bool)
    shape = np.zeros((F, H, W), bool)
    for f, (top, left) in enumerate(shape_track(spec, origin)):
        shape[f] = _shape_mask(spec.shape, top, left, H, W)
    extra = np.broadcast_to(dot_geom, (F, H, W)) & ~shape
    video[extra] = np.asarray(DOT_COLOR, dtype=np.float32)
    video[shape] = np.asarray(COLORS[spec.color], dtype=np.float32)
    background = ~(shape | extra)
    motion = np.broadcast_to(shape.any(axis=0), (F, H, W)).copy() if spec.motion != "static" else shape.copy()
    masks = {
        "shape": shape,
        "color": shape.copy(),
        "background": background,
        "extra": extra.copy(),
        "motion": motion,
    }
    return LabeledVideo(video, encode_prompt(spec), masks, spec)


def _expand_mask(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == like.shape:
        return mask
    if mask.shape == like.shape[:-1]:
        return np.broadcast_to(mask[..., None], like.shape)
    raise ShapeMismatchError(f"mask shape {mask.shape} does not fit video {like.shape}")


PSNR_CAP = 99.0


def psnr_masked(a, b, mask) -> float:
    """10 log10(1 / MSE) over masked entries, capped at 99 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    m = _expand_mask(mask, a)
    if not m.any():
        raise EmptyMaskError("PSNR mask selects nothing")
    diff = a[m].astype(np.float64) - b[m].astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def fulfillment_score(edited, target: SceneSpec, mask) -> float:
    """1 - clamp(masked RMSE / 0.5, 0, 1) against the rendered target scene."""
    edited = np.asarray(edited, dtype=np.float32)
    ref = gen_video(target).video
    if ref.shape != edited.shape:
        raise ShapeMismatchError(f"edited video {edited.shape} vs target render {ref.shape}")
    m = _expand_mask(mask, edited)
    if not m.any():
        raise EmptyMaskError("fulfillment mask selects nothing")
    diff = edited[m].astype(np.float64) - ref[m].astype(np.float64)
    rmse = math.sqrt(float(np.mean(diff * diff)))
    return 1.0 - min(max(rmse / 0.5, 0.0), 1.0)


def sample_spec(stream: RngStream, frames: int = 8, height: int = 32, width: int = 32) -> SceneSpec:
    attrs = {}
    for slot in SLOTS:
        values = _SLOT_VALUES[slot]
        attrs[slot] = values[int(stream.integers(len(values), 1)[0])]
    return SceneSpec(frames=frames, height=height, width=width, **attrs)


def make_dataset(count: int, stream: RngStream, frames: int = 8, height: int = 32, width: int = 32) -> list[LabeledVideo]:
    """``count`` scenes with attributes uniform over the grid; geometry from the same stream."""
    if count < 1:
        raise SpecError("count must be >= 1")
    items = []
    for _ in range(count):
        spec = sample_spec(stream, frames, height, width)
        items.append(gen_video(spec, stream))
    return items


def write_dataset(items: list[LabeledVideo], out_dir) -> Path:
    """VTEN videos plus a JSON-lines manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for idx, item in enumerate(items):
        rel = f"video_{idx:05d}.vten"
        save_tensor(item.video, out_dir / rel)
        record = dataclasses.asdict(item.spec)
        record.update(index=idx, video=rel, prompt=list(item.prompt))
        lines.append(json.dumps(record, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    atomic_write_bytes(manifest, ("\n".join(lines) + "\n").encode())
    return manifest


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def dataset_stream(seed: int) -> RngStream:
    return RngStream(seed, Purpose.DATASET)
