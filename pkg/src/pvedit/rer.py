"""Render-edit-reconstruct on a planar world texture viewed through a sliding crop camera."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .editing import ControlConfig, EditPlan, ProgressionResult, run_progression
from .errors import InvalidShapeError, ShapeMismatchError, SpecError, UndefinedMetricError
from .schedulers import NoiseSchedule

MIN_OVERLAP = 0.25


@dataclass
class PlanarScene:
    texture: np.ndarray   # (H_w, W_w, C)

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=np.float32)
        if self.texture.ndim != 3:
            raise InvalidShapeError(f"texture must be (H, W, C), got {self.texture.shape}")
        if not np.isfinite(self.texture).all():
            raise InvalidShapeError("texture has non-finite texels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.texture.shape


@dataclass
class CameraPath:
    windows: list            # (top, left) per frame
    frame_size: tuple        # (h, w)
    loop: bool = False

    def __post_init__(self):
        self.windows = [(int(t), int(l)) for t, l in self.windows]
        self.frame_size = (int(self.frame_size[0]), int(self.frame_size[1]))

    def __len__(self) -> int:
        return len(self.windows)

    def validate(self, dims) -> None:
        H, W = int(dims[0]), int(dims[1])
        h, w = self.frame_size
        if not self.windows:
            raise SpecError("camera path is empty")
        if h < 1 or w < 1:
            raise SpecError(f"frame size must be positive, got {self.frame_size}")
        for k, (top, left) in enumerate(self.windows):
            if top < 0 or left < 0 or top + h > H or left + w > W:
                raise SpecError(f"window {k} at ({top}, {left}) leaves the {H}x{W} texture")
        pairs = list(zip(self.windows[:-1], self.windows[1:]))
        if self.loop and len(self.windows) > 1:
            pairs.append((self.windows[-1], self.windows[0]))
        for a, b in pairs:
            if overlap_area(a, b, self.frame_size) < MIN_OVERLAP * h * w:
                raise SpecError(f"windows {a} and {b} overlap by less than {MIN_OVERLAP:.0%}")


def overlap_area(a, b, frame_size) -> int:
    h, w = frame_size
    dy = max(0, h - abs(a[0] - b[0]))
    dx = max(0, w - abs(a[1] - b[1]))
    return dy * dx


def pan_path(frames: int, frame_size, step=(0, 2), start=(0, 0), loop: bool = False) -> CameraPath:
    """Straight-line camera moving ``step`` texels per frame."""
    return CameraPath([(start[0] + f * step[0], start[1] + f * step[1]) for f in range(frames)], frame_size, loop)


def render(scene: PlanarScene, path: CameraPath) -> np.ndarray:
    """Frame t is the texel block under window t."""
    path.validate(scene.dims)
    h, w = path.frame_size
    return np.stack([scene.texture[t:t + h, l:l + w] for t, l in path.windows]).copy()


def _check_video(video, path: CameraPath) -> np.ndarray:
    video = np.asarray(video)
    if video.ndim != 4:
        raise InvalidShapeError(f"video must be (F, H, W, C), got {video.shape}")
    if video.shape[0] != len(path) or tuple(video.shape[1:3]) != path.frame_size:
        raise ShapeMismatchError(f"video {video.shape} does not fit a {len(path)}-frame path of {path.frame_size}")
    return video


def reconstruct(video, path: CameraPath, dims) -> tuple[PlanarScene, np.ndarray]:
    """Per-texel mean of every pixel that sees it; uncovered texels are 0.

    This is the least-squares scene for the frames: each texel's residual
    sum is an independent quadratic minimized by its mean.
    """
    H, W = int(dims[0]), int(dims[1])
    path.validate((H, W))
    video = _check_video(video, path)
    C = video.shape[-1]
    h, w = path.frame_size
    acc = np.zeros((H, W, C), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    for frame, (t, l) in zip(video, path.windows):
        acc[t:t + h, l:l + w] += frame
        count[t:t + h, l:l + w] += 1
    covered = count > 0
    tex = np.zeros((H, W, C), dtype=np.float64)
    tex[covered] = acc[covered] / count[covered][:, None]
    return PlanarScene(tex.astype(np.float32)), covered


def residual(scene: PlanarScene, video, path: CameraPath) -> float:
    """Sum of squared differences between the video and the scene's rendering."""
    diff = render(scene, path).astype(np.float64) - np.asarray(video, dtype=np.float64)
    return float(np.sum(diff * diff))


def consistency_metric(video, path: CameraPath) -> float:
    """RMS disagreement between every pair of frames on the texels both see."""
    video = _check_video(video, path)
    h, w = path.frame_size
    total = 0.0
    count = 0
    for a, b in combinations(range(len(path)), 2):
        (ta, la), (tb, lb) = path.windows[a], path.windows[b]
        top, left = max(ta, tb), max(la, lb)
        bottom, right = min(ta, tb) + h, min(la, lb) + w
        if bottom <= top or right <= left:
            continue
        pa = video[a, top - ta:bottom - ta, left - la:right - la].astype(np.float64)
        pb = video[b, top - tb:bottom - tb, left - lb:right - lb].astype(np.float64)
        d = pa - pb
        total += float(np.sum(d * d))
        count += d.size
    if count == 0:
        raise UndefinedMetricError("no two frames of the path overlap")
    return math.sqrt(total / count)


@dataclass
class RerResult:
    scene: PlanarScene
    coverage: np.ndarray
    video: np.ndarray                 # final video: rendering of the scene when the hook ran
    progression: ProgressionResult
    subtask_scenes: list = field(default_factory=list)

    @property
    def raw_final(self) -> np.ndarray:
        """Last subtask's edited video before any reconstruction."""
        return self.progression.final.edited


def rer_edit(scene: PlanarScene, path: CameraPath, plan: EditPlan, cfg: ControlConfig, model, sched: NoiseSchedule,
             *, seed: int = 0, use_hook: bool = True, subtask_fn=None) -> RerResult:
    """Progressive edit of the scene; after each subtask the video is reconstructed and re-rendered."""
    dims = scene.dims
    v0 = render(scene, path)
    scenes = []

    def hook(t, video):
        s, _ = reconstruct(video, path, dims)
        scenes.append(s)
        return render(s, path)

    prog = run_progression(v0, plan, cfg, model, sched, (hook,) if use_hook else (), seed=seed,
                           subtask_fn=subtask_fn)
    if not use_hook:
        scenes = [reconstruct(r.output, path, dims)[0] for r in prog.subtasks]
    final, coverage = reconstruct(prog.video, path, dims)
    return RerResult(final, coverage, prog.video, prog, scenes)
