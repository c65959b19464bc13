"""A small Siamese tracker with a stochastic action interface.

The network matches template features against search features by depthwise
cross-correlation and predicts, for every location of an ``H x W`` grid, a
confidence score and a box. Choosing a location is the tracker's action; the
action distribution over the ``N = H * W`` candidates is either a softmax over
logits of the (post-processed) scores or a plain softmax over raw scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxgeom import Box, CropSpec, clip_box, search_region
from .episodes import Episode
from .metrics import episode_reward

STYLES = ("logit-softmax", "softmax")
MODES = ("sample", "argmax")


@dataclass(frozen=True)
class TrackerConfig:
    template_size: int = 64
    search_size: int = 128
    stride: int = 8
    channels: tuple[int, int, int] = (16, 32, 48)
    head_channels: int = 32
    template_context: float = 1.0
    search_context: float = 2.0
    penalty_weight: float = 0.3
    distribution_style: str = "logit-softmax"
    score_eps: float = 1e-6
    max_log_size: float = 1.5
    recovery_inflate: float = 1.1
    min_box_side: float = 1.0

    def __post_init__(self):
        if self.distribution_style not in STYLES:
            raise ValueError(f"distribution_style must be one of {STYLES}")
        if not 0 <= self.penalty_weight < 1:
            raise ValueError("penalty_weight must lie in [0, 1)")
        if self.search_size % self.stride or self.template_size % self.stride:
            raise ValueError("crop sizes must be multiples of the stride")
        if self.stride != 8:
            raise ValueError("the backbone has a fixed total stride of 8")

    @property
    def template_feat(self) -> int:
        return self.template_size // self.stride

    @property
    def grid(self) -> int:
        return self.search_size // self.stride + 1

    @property
    def nominal_size(self) -> float:
        """Crop-pixel side of a square box that defined the search region."""
        return self.search_size / (2.0 * self.search_context)

    @property
    def num_candidates(self) -> int:
        return self.grid * self.grid


def _conv_bn(cin, cout, stride, relu=True):
    layers = [nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout)]
    if relu:
        layers.append(nn.ReLU(inplace=True))
    return layers


def xcorr_depthwise(x: torch.Tensor, kernel: torch.Tensor, padding: int) -> torch.Tensor:
    b, c, h, w = x.shape
    out = F.conv2d(
        x.reshape(1, b * c, h, w),
        kernel.reshape(b * c, 1, kernel.shape[2], kernel.shape[3]),
        padding=padding,
        groups=b * c,
    )
    return out.reshape(b, c, out.shape[2], out.shape[3])


class SiameseTracker(nn.Module):
    def __init__(self, cfg: TrackerConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or TrackerConfig()
        c1, c2, c3 = cfg.channels
        self.backbone = nn.Sequential(
            *_conv_bn(3, c1, 2),
            *_conv_bn(c1, c2, 2),
            *_conv_bn(c2, c3, 2),
            *_conv_bn(c3, c3, 1, relu=False),
        )
        hc = cfg.head_channels
        # heads see the correlation map and the search features aligned to it
        self.cls_head = nn.Sequential(nn.Conv2d(2 * c3, hc, 3, 1, 1), nn.ReLU(inplace=True), nn.Conv2d(hc, 1, 1))
        self.box_head = nn.Sequential(nn.Conv2d(2 * c3, hc, 3, 1, 1), nn.ReLU(inplace=True), nn.Conv2d(hc, 4, 1))
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.zeros_(self.box_head[-1].bias)

        g = cfg.grid
        offs = (torch.arange(g, dtype=torch.float64) - (g - 1) / 2) * cfg.stride + cfg.search_size / 2
        ys, xs = torch.meshgrid(offs, offs, indexing="ij")
        self.register_buffer("ref_points", torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1), persistent=False)
        hann = torch.from_numpy(np.outer(np.hanning(g), np.hanning(g)).reshape(-1))
        self.register_buffer("window", hann, persistent=False)

    def _prep(self, images) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(images)
        x = images.to(dtype)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        x = x.permute(0, 3, 1, 2)
        return (x / 255.0 - 0.5) / 0.25

    def template_features(self, template_crops) -> torch.Tensor:
        x = self._prep(template_crops)
        if x.shape[-1] != self.cfg.template_size or x.shape[-2] != self.cfg.template_size:
            raise ValueError(f"template crop must be {self.cfg.template_size}px, got {tuple(x.shape[-2:])}")
        return self.backbone(x)

    def forward(self, template_feats: torch.Tensor, search_crops) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Score and box predictions for a batch of search crops.

        Returns raw logits ``(B, N)``, squashed scores ``(B, N)`` and
        candidate boxes ``(B, N, 4)`` in crop xywh. Sizes are regressed in log
        space around :attr:`TrackerConfig.nominal_size`, the crop-pixel size
        of a square previous box.
        """
        cfg = self.cfg
        x = self._prep(search_crops)
        if x.shape[-1] != cfg.search_size or x.shape[-2] != cfg.search_size:
            raise ValueError(f"search crop must be {cfg.search_size}px, got {tuple(x.shape[-2:])}")
        feats = self.backbone(x)
        corr = xcorr_depthwise(feats, template_feats, padding=cfg.template_feat // 2)
        corr = corr / (cfg.template_feat**2)
        # score cell i is centred between feature cells i-1 and i
        aligned = F.avg_pool2d(feats, 2, stride=1, padding=1, count_include_pad=False)
        h = torch.cat([corr, aligned], dim=1)
        raw = self.cls_head(h).flatten(1)
        reg = self.box_head(h).flatten(2).transpose(1, 2)
        ref = self.ref_points.to(reg.dtype)
        centre = ref.unsqueeze(0) + reg[..., :2] * cfg.stride
        size = cfg.nominal_size * torch.exp(reg[..., 2:].clamp(-cfg.max_log_size, cfg.max_log_size))
        boxes = torch.cat([centre - size / 2, size], dim=-1)
        return raw, torch.sigmoid(raw), boxes


# ---------------------------------------------------------------------------
# score post-processing and the action distribution


def hann_window(grid: int) -> np.ndarray:
    return np.outer(np.hanning(grid), np.hanning(grid)).reshape(-1)


def apply_penalty(scores, penalty_weight: float, window=None):
    """Convex blend of candidate scores with a centred 2-D Hann window."""
    if not 0 <= penalty_weight < 1:
        raise ValueError("penalty_weight must lie in [0, 1)")
    is_np = isinstance(scores, np.ndarray)
    s = torch.from_numpy(scores) if is_np else scores
    if window is None:
        n = s.shape[-1]
        g = int(round(math.sqrt(n)))
        if g * g != n:
            raise ValueError("scores must cover a square grid")
        window = torch.from_numpy(hann_window(g))
    window = torch.as_tensor(window).to(s.dtype)
    out = (1 - penalty_weight) * s + penalty_weight * window
    return out.numpy() if is_np else out


@dataclass
class ActionDistribution:
    logprobs: torch.Tensor
    mode_tag: str

    @property
    def probs(self) -> torch.Tensor:
        return self.logprobs.exp()


def action_distribution(x, style: str = "logit-softmax", eps: float = 1e-6) -> ActionDistribution:
    """Categorical distribution over the last axis of ``x``.

    ``logit-softmax`` applies the inverse sigmoid to scores in (0, 1) before a
    softmax; inputs are clamped to ``[eps, 1 - eps]`` first. ``softmax`` uses
    the scores directly as logits.
    """
    if style not in STYLES:
        raise ValueError(f"unknown distribution style {style!r}")
    x = torch.as_tensor(x)
    if style == "logit-softmax":
        if not torch.is_floating_point(x):
            x = x.to(torch.float64)
        xc = x.clamp(eps, 1 - eps)
        logits = torch.log(xc) - torch.log1p(-xc)
    else:
        logits = x
    return ActionDistribution(torch.log_softmax(logits, dim=-1), style)


def _sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    u = rng.random() * c[-1]
    return int(min(np.searchsorted(c, u, side="right"), len(p) - 1))


def select_action(dist: ActionDistribution, mode: str, rng: np.random.Generator | None = None):
    """Pick one candidate from a 1-D distribution; returns ``(index, logprob)``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    lp = dist.logprobs
    if lp.dim() != 1:
        raise ValueError("select_action expects a single distribution")
    p = lp.detach().to(torch.float64).exp().numpy()
    if mode == "argmax":
        idx = int(np.argmax(p))
    else:
        if rng is None:
            raise ValueError("sample mode needs an rng")
        idx = _sample_index(p, rng)
    return idx, lp[idx]


# ---------------------------------------------------------------------------
# tracking state and rollouts


@dataclass
class ScoreMap:
    scores: torch.Tensor
    boxes: torch.Tensor
    crop: CropSpec
    raw: torch.Tensor | None = None
    penalized: torch.Tensor | None = None

    def __post_init__(self):
        if self.scores.shape[-1] != self.boxes.shape[-2]:
            raise ValueError("scores and boxes must cover the same candidates")


@dataclass
class TemplateState:
    features: torch.Tensor
    box: Box
    crop: CropSpec
    image: np.ndarray


@dataclass
class TrackState:
    template: TemplateState
    prev_box: Box
    last_valid: Box
    frame_size: tuple[int, int]


@dataclass
class Trajectory:
    indices: np.ndarray
    logprobs: torch.Tensor
    boxes: np.ndarray
    reward: float | None
    mode: str
    crops: list[CropSpec] = field(default_factory=list)
    search_crops: np.ndarray | None = None
    template_crop: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.indices)


def _frame_size(frame) -> tuple[int, int]:
    return int(frame.shape[1]), int(frame.shape[0])


def init_template(model: SiameseTracker, frame: np.ndarray, box: Box, grad: bool = False) -> TemplateState:
    if not (box.w > 0 and box.h > 0):
        raise ValueError(f"template box must have positive area, got {box}")
    cfg = model.cfg
    fw, fh = _frame_size(frame)
    crop = search_region(box, cfg.template_context, fw, fh, cfg.template_size)
    image = crop.extract(frame)
    with torch.set_grad_enabled(grad):
        feats = model.template_features(image)
    return TemplateState(feats, box, crop, image)


def _valid_prev(state_prev: Box, last_valid: Box, cfg: TrackerConfig, frame_size) -> tuple[Box, Box]:
    if state_prev.w >= cfg.min_box_side and state_prev.h >= cfg.min_box_side:
        return state_prev, state_prev
    # collapsed prediction: fall back to an inflated copy of the last good box
    fw, fh = frame_size
    b = last_valid.scale_about_center(cfg.recovery_inflate)
    cap = max(fw, fh)
    b = Box.from_center(b.cx, b.cy, min(b.w, cap), min(b.h, cap))
    return b, b


def _search_inputs(cfg: TrackerConfig, frame: np.ndarray, prev: Box):
    fw, fh = _frame_size(frame)
    crop = search_region(prev, cfg.search_context, fw, fh, cfg.search_size)
    return crop, crop.extract(frame)


def score_candidates(model: SiameseTracker, raw: torch.Tensor, scores: torch.Tensor, style: str | None = None) -> tuple[torch.Tensor, ActionDistribution]:
    """Post-process scores and build the action distribution (batched)."""
    cfg = model.cfg
    style = style or cfg.distribution_style
    if style == "logit-softmax":
        x = apply_penalty(scores, cfg.penalty_weight, model.window)
        return x, action_distribution(x, style, cfg.score_eps)
    # raw scores are unbounded here, so no window is blended in
    return raw, action_distribution(raw, style, cfg.score_eps)


def decode_box(score_map: ScoreMap, index: int) -> Box:
    """Map candidate ``index`` from crop to frame coordinates and clip it."""
    crop = score_map.crop
    b = score_map.boxes.detach().reshape(-1, 4)[index].to(torch.float64).numpy()
    fb = crop.boxes_to_frame(b)
    out = Box(float(fb[0]), float(fb[1]), max(0.0, float(fb[2])), max(0.0, float(fb[3])))
    if crop.frame_size is not None:
        out = clip_box(out, *crop.frame_size)
    return out


def track_step(model: SiameseTracker, state: TrackState, frame: np.ndarray, mode: str, rng=None):
    """One tracking step; returns ``(box, logprob, new_state, score_map)``."""
    cfg = model.cfg
    prev, last_valid = _valid_prev(state.prev_box, state.last_valid, cfg, state.frame_size)
    crop, image = _search_inputs(cfg, frame, prev)
    raw, scores, boxes = model(state.template.features, image)
    x, dist = score_candidates(model, raw, scores)
    idx, lp = select_action(ActionDistribution(dist.logprobs[0], dist.mode_tag), mode, rng)
    sm = ScoreMap(scores[0], boxes[0], crop, raw=raw[0], penalized=x[0])
    box = decode_box(sm, idx)
    new_state = TrackState(state.template, box, last_valid, state.frame_size)
    return box, lp, new_state, sm


def start_state(model: SiameseTracker, frame, box: Box, grad: bool = False) -> TrackState:
    tmpl = init_template(model, frame, box, grad=grad)
    return TrackState(tmpl, box, box, _frame_size(frame))


def run_episodes(
    model: SiameseTracker,
    episodes: list[Episode],
    mode: str,
    rngs=None,
    record: bool = True,
) -> list[Trajectory]:
    """Roll out several equal-length episodes in lockstep without gradients.

    Rewards are filled in; log-probabilities are detached. Use
    :func:`replay` to rebuild them on the autograd graph.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if not episodes:
        return []
    T = episodes[0].T
    if any(e.T != T for e in episodes):
        raise ValueError("episodes in one batch must share T")
    if mode == "sample":
        if rngs is None or len(rngs) != len(episodes):
            raise ValueError("sample mode needs one rng per episode")
    cfg = model.cfg
    B = len(episodes)
    with torch.no_grad():
        templates = [init_template(model, e.template_frame, e.template_box) for e in episodes]
        zfeat = torch.cat([t.features for t in templates], dim=0)
        prev = [e.template_box for e in episodes]
        last_valid = list(prev)
        fsize = [_frame_size(e.template_frame) for e in episodes]
        idx_out = np.zeros((B, T), dtype=np.int64)
        lp_out = np.zeros((B, T), dtype=np.float64)
        box_out = np.zeros((B, T, 4), dtype=np.float64)
        crops_out = [[None] * T for _ in range(B)]
        images_out = np.zeros((B, T, cfg.search_size, cfg.search_size, 3), dtype=np.uint8) if record else None
        for t in range(T):
            crops, images = [], []
            for b, e in enumerate(episodes):
                frame = e.search_frames[t]
                p, last_valid[b] = _valid_prev(prev[b], last_valid[b], cfg, fsize[b])
                crop, image = _search_inputs(cfg, frame, p)
                crops.append(crop)
                images.append(image)
            images = np.stack(images)
            raw, scores, boxes = model(zfeat, images)
            _, dist = score_candidates(model, raw, scores)
            for b in range(B):
                d = ActionDistribution(dist.logprobs[b], dist.mode_tag)
                i, lp = select_action(d, mode, rngs[b] if rngs is not None else None)
                sm = ScoreMap(scores[b], boxes[b], crops[b])
                box = decode_box(sm, i)
                prev[b] = box
                idx_out[b, t] = i
                lp_out[b, t] = float(lp)
                box_out[b, t] = box.as_array()
                crops_out[b][t] = crops[b]
                if record:
                    images_out[b, t] = images[b]
    out = []
    for b, e in enumerate(episodes):
        out.append(
            Trajectory(
                indices=idx_out[b],
                logprobs=torch.from_numpy(lp_out[b]),
                boxes=box_out[b],
                reward=episode_reward(box_out[b], e.gt_boxes),
                mode=mode,
                crops=crops_out[b],
                search_crops=images_out[b] if record else None,
                template_crop=templates[b].image,
            )
        )
    return out


def run_episode(model: SiameseTracker, episode: Episode, mode: str, rng=None, record: bool = True) -> Trajectory:
    return run_episodes(model, [episode], mode, None if rng is None else [rng], record)[0]


def replay(model: SiameseTracker, traj: Trajectory) -> tuple[torch.Tensor, ScoreMap]:
    """Recompute a recorded trajectory's per-step log-probabilities on the
    autograd graph, holding its observations (crops) fixed.

    Returns the ``(T,)`` log-probabilities of the recorded indices and a
    batched :class:`ScoreMap` whose ``crop`` is the list of per-step crops.
    """
    if traj.search_crops is None or traj.template_crop is None:
        raise ValueError("trajectory was rolled out without recording crops")
    zfeat = model.template_features(traj.template_crop)
    T = traj.T
    raw, scores, boxes = model(zfeat.expand(T, -1, -1, -1), traj.search_crops)
    x, dist = score_candidates(model, raw, scores)
    idx = torch.as_tensor(traj.indices, dtype=torch.long)
    lp = dist.logprobs.gather(1, idx[:, None]).squeeze(1)
    return lp, ScoreMap(scores, boxes, traj.crops, raw=raw, penalized=x)


def attach_logprobs(model: SiameseTracker, traj: Trajectory) -> tuple[Trajectory, ScoreMap]:
    lp, sm = replay(model, traj)
    return replace(traj, logprobs=lp), sm
