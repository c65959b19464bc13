"""Videos, the on-disk dataset layout, a synthetic video generator, and the
two training samplers (sequence-level episodes and frame-level pairs)."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .boxgeom import Box, PerturbConfig, perturb

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")
ANNOTATION_FILE = "groundtruth.txt"


class DatasetError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class LazyFrames(Sequence):
    """Frame list backed by image files; each access decodes from disk, so
    concurrent readers share no mutable state."""

    def __init__(self, paths: list[Path]):
        self.paths = list(paths)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        img = cv2.imread(str(self.paths[i]), cv2.IMREAD_COLOR)
        if img is None:
            raise DatasetError(f"cannot decode {self.paths[i]}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


@dataclass
class Video:
    """``frames`` holds HxWx3 uint8 RGB images; ``boxes`` is an ``(n, 4)``
    float array of xywh annotations, one row per frame."""

    id: str
    frames: Sequence
    boxes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.frames) != len(self.boxes):
            raise DatasetError(
                f"{self.id}: {len(self.frames)} frames but {len(self.boxes)} boxes"
            )
        if len(self.boxes) < 2:
            raise DatasetError(f"{self.id}: a video needs at least 2 frames")

    def __len__(self):
        return len(self.boxes)

    def box(self, i: int) -> Box:
        return Box.from_array(self.boxes[i])


@dataclass
class Episode:
    template_frame: np.ndarray
    template_box: Box
    search_frames: list
    gt_boxes: np.ndarray
    interval: int
    source_id: str
    start_index: int

    def __post_init__(self):
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.search_frames) != len(self.gt_boxes) or len(self.gt_boxes) < 1:
            raise ValueError("episode needs T >= 1 search frames with matching boxes")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")

    @property
    def T(self) -> int:
        return len(self.gt_boxes)

    @property
    def frame_indices(self) -> list[int]:
        return [self.start_index + t * self.interval for t in range(self.T + 1)]


def episode_from_video(video: Video, start: int, T: int, interval: int) -> Episode:
    idx = [start + t * interval for t in range(T + 1)]
    if idx[-1] >= len(video):
        raise SamplingError(f"{video.id}: episode end {idx[-1]} beyond length {len(video)}")
    return Episode(
        template_frame=video.frames[start],
        template_box=video.box(start),
        search_frames=[video.frames[i] for i in idx[1:]],
        gt_boxes=video.boxes[idx[1:]],
        interval=interval,
        source_id=video.id,
        start_index=start,
    )


def full_sequence_episode(video: Video, interval: int = 1) -> Episode:
    """Whole video tracked every ``interval``-th frame from frame 0."""
    T = (len(video) - 1) // interval
    if T < 1:
        raise SamplingError(f"{video.id}: too short for interval {interval}")
    return episode_from_video(video, 0, T, interval)


# ---------------------------------------------------------------------------
# on-disk datasets


def _parse_annotation(path: Path, seq_id: str) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").split(",")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                vals = []
            if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
                raise DatasetError(f"{seq_id}: malformed annotation at line {lineno}: {line!r}")
            rows.append(vals)
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def load_video(seq_dir: Path) -> Video:
    seq_dir = Path(seq_dir)
    seq_id = seq_dir.name
    ann = seq_dir / ANNOTATION_FILE
    if not ann.is_file():
        raise DatasetError(f"{seq_id}: missing {ANNOTATION_FILE}")
    images = sorted(p for p in seq_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    boxes = _parse_annotation(ann, seq_id)
    if len(images) != len(boxes):
        raise DatasetError(
            f"{seq_id}: count mismatch, {len(images)} images vs {len(boxes)} annotation lines"
        )
    return Video(seq_id, LazyFrames(images), boxes)


def load_dataset(root) -> list[Video]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    return [load_video(d) for d in sorted(root.iterdir()) if d.is_dir()]


def format_box_line(box) -> str:
    # repr() round-trips floats exactly
    return ",".join(repr(float(v)) for v in box)


def write_boxes(path, boxes) -> None:
    with open(path, "w") as f:
        for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4):
            f.write(format_box_line(b) + "\n")


def write_video(video: Video, root, ext: str = ".png") -> Path:
    seq_dir = Path(root) / video.id
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.frames, start=1):
        ok = cv2.imwrite(str(seq_dir / f"{i:08d}{ext}"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
        if not ok:
            raise OSError(f"failed to write frame {i} of {video.id}")
    write_boxes(seq_dir / ANNOTATION_FILE, video.boxes)
    return seq_dir


def write_dataset(videos, root, ext: str = ".png") -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in videos:
        write_video(v, root, ext)
    return root


def materialize(video: Video) -> Video:
    """Decode every frame into memory."""
    return Video(video.id, [np.asarray(f) for f in video.frames], video.boxes.copy())


# ---------------------------------------------------------------------------
# synthetic videos


@dataclass(frozen=True)
class SyntheticSceneConfig:
    frame_size: tuple[int, int] = (160, 160)
    num_frames: int = 200
    num_distractors: int = 2
    occluder_rate: float = 0.01
    occlusion_length: tuple[int, int] = (6, 16)
    target_speed: tuple[float, float] = (0.5, 3.0)
    scale_drift: float = 0.01
    target_size: tuple[float, float] = (16.0, 30.0)
    similar_distractor_prob: float = 0.5
    background_contrast: float = 40.0
    noise_sigma: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.occluder_rate <= 1 or not 0 <= self.similar_distractor_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        if min(self.target_speed) < 0 or self.target_speed[0] > self.target_speed[1]:
            raise ValueError("target_speed must be a non-negative (min, max) range")
        if self.num_frames < 2 or self.num_distractors < 0:
            raise ValueError("need num_frames >= 2 and num_distractors >= 0")


@dataclass
class _Appearance:
    shape: str
    color: np.ndarray
    accent: np.ndarray
    pattern: str


def _random_color(rng) -> np.ndarray:
    hsv = np.array([[[rng.uniform(0, 180), rng.uniform(150, 255), rng.uniform(160, 255)]]], np.uint8)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float64)


def _random_appearance(rng) -> _Appearance:
    return _Appearance(
        shape=str(rng.choice(["rect", "ellipse"])),
        color=_random_color(rng),
        accent=_random_color(rng),
        pattern=str(rng.choice(["stripe", "core", "bar"])),
    )


def _similar_appearance(app: _Appearance, rng) -> _Appearance:
    jitter = rng.uniform(-35, 35, size=3)
    return _Appearance(
        shape=app.shape,
        color=np.clip(app.color + jitter, 0, 255),
        accent=_random_color(rng),
        pattern=app.pattern,
    )


@dataclass
class _Mover:
    cx: float
    cy: float
    w: float
    h: float
    v: np.ndarray
    v_goal: np.ndarray
    segment_left: int
    speed: tuple[float, float]

    def _new_goal(self, rng):
        speed = rng.uniform(*self.speed)
        theta = rng.uniform(0, 2 * np.pi)
        self.v_goal = speed * np.array([np.cos(theta), np.sin(theta)])
        self.segment_left = int(rng.integers(10, 40))

    def step(self, rng, fw, fh, scale_drift, size_range):
        if scale_drift > 0:
            lo, hi = size_range
            dw, dh = rng.uniform(-scale_drift, scale_drift, size=2)
            # growth is capped so the current centre stays admissible
            self.w = float(np.clip(self.w * np.exp(dw), lo, min(hi, 2 * min(self.cx, fw - self.cx))))
            self.h = float(np.clip(self.h * np.exp(dh), lo, min(hi, 2 * min(self.cy, fh - self.cy))))
        if self.segment_left <= 0:
            self._new_goal(rng)
        self.segment_left -= 1
        # convex blend of two vectors within the speed bound stays within it
        self.v = 0.85 * self.v + 0.15 * self.v_goal
        nx, ny = self.cx + self.v[0], self.cy + self.v[1]
        if not (self.w / 2 <= nx <= fw - self.w / 2):
            self.v[0] = -self.v[0]
            self.v_goal[0] = -self.v_goal[0]
            nx = self.cx + self.v[0]
        if not (self.h / 2 <= ny <= fh - self.h / 2):
            self.v[1] = -self.v[1]
            self.v_goal[1] = -self.v_goal[1]
            ny = self.cy + self.v[1]
        # projecting onto an interval that holds the old centre never lengthens the step
        self.cx = float(np.clip(nx, self.w / 2, fw - self.w / 2))
        self.cy = float(np.clip(ny, self.h / 2, fh - self.h / 2))

    def box(self) -> np.ndarray:
        return np.array([self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h])


def _spawn(rng, cfg: SyntheticSceneConfig) -> _Mover:
    fw, fh = cfg.frame_size
    lo, hi = cfg.target_size
    w, h = rng.uniform(lo, hi, size=2)
    m = _Mover(
        cx=rng.uniform(w / 2, fw - w / 2),
        cy=rng.uniform(h / 2, fh - h / 2),
        w=float(w),
        h=float(h),
        v=np.zeros(2),
        v_goal=np.zeros(2),
        segment_left=0,
        speed=cfg.target_speed,
    )
    m._new_goal(rng)
    m.v = m.v_goal.copy()
    return m


def _draw(canvas: np.ndarray, box: np.ndarray, app: _Appearance) -> None:
    x, y, w, h = box
    x1, y1 = int(round(x)), int(round(y))
    x2, y2 = int(round(x + w)) - 1, int(round(y + h)) - 1
    color = tuple(float(c) for c in app.color)
    accent = tuple(float(c) for c in app.accent)
    if app.shape == "rect":
        cv2.rectangle(canvas, (x1, y1), (x2, y2), color, thickness=-1)
    else:
        center = (int(round(x + w / 2)), int(round(y + h / 2)))
        axes = (max(1, int(round(w / 2))), max(1, int(round(h / 2))))
        cv2.ellipse(canvas, center, axes, 0, 0, 360, color, thickness=-1)
    cx, cy = x + w / 2, y + h / 2
    if app.pattern == "stripe":
        cv2.rectangle(canvas, (x1 + 1, int(round(cy - h / 8))), (x2 - 1, int(round(cy + h / 8))), accent, -1)
    elif app.pattern == "core":
        cv2.rectangle(
            canvas,
            (int(round(cx - w / 5)), int(round(cy - h / 5))),
            (int(round(cx + w / 5)), int(round(cy + h / 5))),
            accent,
            -1,
        )
    else:
        cv2.rectangle(canvas, (int(round(cx - w / 8)), y1 + 1), (int(round(cx + w / 8)), y2 - 1), accent, -1)


def _background(rng, cfg: SyntheticSceneConfig) -> np.ndarray:
    fw, fh = cfg.frame_size
    base = rng.uniform(90, 160, size=3)
    coarse = rng.normal(0, 1, size=(6, 6, 3))
    tex = cv2.resize(coarse, (fw, fh), interpolation=cv2.INTER_CUBIC)
    return base + cfg.background_contrast * tex / 2.5


def generate_synthetic_video(cfg: SyntheticSceneConfig, video_id: str | None = None) -> Video:
    """Render a video of one target among look-alike distractors.

    Occlusion events cover the target with a static patch for a contiguous
    span; its annotation keeps following the (hidden) target.
    """
    rng = np.random.default_rng(cfg.seed)
    fw, fh = cfg.frame_size
    lo, hi = cfg.target_size
    size_range = (0.7 * lo, 1.4 * hi)
    bg = _background(rng, cfg)

    target_app = _random_appearance(rng)
    target = _spawn(rng, cfg)
    distractors = []
    for _ in range(cfg.num_distractors):
        if rng.random() < cfg.similar_distractor_prob:
            app = _similar_appearance(target_app, rng)
        else:
            app = _random_appearance(rng)
        distractors.append((_spawn(rng, cfg), app))

    frames, boxes = [], []
    occluder = None
    occlusion_left = 0
    for t in range(cfg.num_frames):
        if t > 0:
            target.step(rng, fw, fh, cfg.scale_drift, size_range)
            for m, _ in distractors:
                m.step(rng, fw, fh, cfg.scale_drift, size_range)
        box = target.box()
        # occlusions start after the template frame
        if occlusion_left == 0 and t > 0 and rng.random() < cfg.occluder_rate:
            occlusion_left = int(rng.integers(cfg.occlusion_length[0], cfg.occlusion_length[1] + 1))
            pad = 0.45 * max(box[2], box[3])
            occluder = (
                np.array([box[0] - pad, box[1] - pad, box[2] + 2 * pad, box[3] + 2 * pad]),
                rng.uniform(70, 180, size=3),
            )
        canvas = bg.copy()
        for m, app in distractors:
            _draw(canvas, m.box(), app)
        _draw(canvas, box, target_app)
        if occlusion_left > 0:
            (ox, oy, ow, oh), ocol = occluder
            cv2.rectangle(
                canvas,
                (int(round(ox)), int(round(oy))),
                (int(round(ox + ow)), int(round(oy + oh))),
                tuple(float(c) for c in ocol),
                -1,
            )
            occlusion_left -= 1
        if cfg.noise_sigma > 0:
            canvas = canvas + rng.normal(0, cfg.noise_sigma, size=canvas.shape)
        frames.append(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
        boxes.append(box)
    return Video(video_id or f"synth_{cfg.seed:06d}", frames, np.array(boxes))


def generate_synthetic_dataset(cfg: SyntheticSceneConfig, num_videos: int, prefix: str = "synth") -> list[Video]:
    """``num_videos`` videos whose seeds are derived from ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(num_videos)
    out = []
    for i, s in enumerate(seeds):
        vcfg = replace(cfg, seed=int(s))
        out.append(generate_synthetic_video(vcfg, f"{prefix}_{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# samplers


def admissible_intervals(length: int, T: int, max_interval: int) -> int:
    """Largest admissible interval for a video of ``length`` frames (0 if none)."""
    return max(0, min(max_interval, (length - 1) // T))


def sample_episode(dataset: Sequence[Video], T: int, max_interval: int, rng: np.random.Generator) -> Episode:
    if T < 1 or max_interval < 1:
        raise ValueError("T and max_interval must be >= 1")
    usable = [v for v in dataset if admissible_intervals(len(v), T, max_interval) >= 1]
    if not usable:
        raise SamplingError(f"no video is long enough for T={T} at interval 1")
    video = usable[int(rng.integers(len(usable)))]
    top = admissible_intervals(len(video), T, max_interval)
    interval = int(rng.integers(1, top + 1))
    start = int(rng.integers(0, len(video) - T * interval))
    return episode_from_video(video, start, T, interval)


@dataclass
class FramePair:
    template_frame: np.ndarray
    template_box: Box
    search_frame: np.ndarray
    gt_box: Box
    anchor_box: Box
    source_id: str = ""
    indices: tuple[int, int] = field(default=(0, 0))


def sample_frame_pair(dataset: Sequence[Video], perturb_cfg: PerturbConfig, rng: np.random.Generator) -> FramePair:
    if not dataset:
        raise SamplingError("dataset is empty")
    video = dataset[int(rng.integers(len(dataset)))]
    i = int(rng.integers(len(video)))
    j = int(rng.integers(len(video)))
    gt = video.box(j)
    return FramePair(
        template_frame=video.frames[i],
        template_box=video.box(i),
        search_frame=video.frames[j],
        gt_box=gt,
        anchor_box=perturb(gt, perturb_cfg, rng),
        source_id=video.id,
        indices=(i, j),
    )


def dataset_fingerprint(root) -> str:
    """Content hash of the sequence directories under ``root`` (relative
    paths and bytes). Loose files at the top level, such as a run manifest,
    are not part of the dataset and are ignored."""
    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if Path(dirpath) == root:
            continue
        for name in sorted(filenames):
            p = Path(dirpath) / name
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
