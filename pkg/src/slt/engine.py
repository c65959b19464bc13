"""Training: frame-level pre-training, the self-critical sequence-level
objective, and resumable training loops with per-step statistics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import config as config_mod
from .boxgeom import Box, iou_array, search_region
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .episodes import FramePair, Video, full_sequence_episode, sample_episode, sample_frame_pair
from .tracker import ScoreMap, SiameseTracker, Trajectory, attach_logprobs, replay, run_episode, run_episodes

log = logging.getLogger(__name__)

STATS_FIELDS = ("step", "loss", "mean_r_sample", "mean_r_greedy", "mean_advantage")

# salts keep the random streams of the two stages apart
_PRETRAIN_SALT = 1
_SLT_SALT = 2
_VAL_SALT = 3


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# box helpers on tensors


def xywh_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    return torch.cat([b[..., :2] + b[..., 2:] / 2, b[..., 2:]], dim=-1)


def giou_xywh(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise generalised IoU for ``(..., 4)`` xywh tensors."""
    ax2, ay2 = a[..., 0] + a[..., 2], a[..., 1] + a[..., 3]
    bx2, by2 = b[..., 0] + b[..., 2], b[..., 1] + b[..., 3]
    iw = (torch.minimum(ax2, bx2) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(ay2, by2) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    hull = (torch.maximum(ax2, bx2) - torch.minimum(a[..., 0], b[..., 0])) * (
        torch.maximum(ay2, by2) - torch.minimum(a[..., 1], b[..., 1])
    )
    tiny = torch.finfo(a.dtype).tiny
    return inter / union.clamp(min=tiny) - (hull - union) / hull.clamp(min=tiny)


def grid_points(n: int, resolution: int) -> np.ndarray:
    """Reference point (crop pixels) of each of ``n`` candidates on a square grid."""
    g = int(round(math.sqrt(n)))
    stride = resolution / (g - 1)
    offs = (np.arange(g) - (g - 1) / 2) * stride + resolution / 2
    ys, xs = np.meshgrid(offs, offs, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _crops_of(score_map: ScoreMap, batch: int) -> list:
    crop = score_map.crop
    if isinstance(crop, (list, tuple)):
        if len(crop) != batch:
            raise ValueError("one crop per score map row expected")
        return list(crop)
    return [crop] * batch


def _box_rows(gt) -> np.ndarray:
    if isinstance(gt, Box):
        return gt.as_array()[None]
    if isinstance(gt, (list, tuple)) and gt and isinstance(gt[0], Box):
        return np.array([g.as_array() for g in gt])
    return np.asarray(gt, dtype=np.float64).reshape(-1, 4)


def _gt_in_crop(gt, crops) -> np.ndarray:
    gt = _box_rows(gt)
    out = np.empty_like(gt)
    for i, (g, c) in enumerate(zip(gt, crops)):
        ox, oy = c.origin
        s = c.scale
        out[i] = [(g[0] - ox) * s, (g[1] - oy) * s, g[2] * s, g[3] * s]
    return out


def positive_mask(gt_crop: np.ndarray, n: int, resolution: int, positive_frac: float = 0.5) -> np.ndarray:
    """Candidates whose reference point lies in the central region of the
    ground-truth box (half-extent scaled by ``positive_frac``)."""
    pts = grid_points(n, resolution)
    c = gt_crop[:, None, :2] + gt_crop[:, None, 2:] / 2
    half = positive_frac * gt_crop[:, None, 2:] / 2
    return np.all(np.abs(pts[None] - c) <= half, axis=-1)


# ---------------------------------------------------------------------------
# losses


def frame_level_loss(
    score_map: ScoreMap,
    gt,
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
    positive_frac: float = 0.5,
    return_terms: bool = False,
):
    """Supervised localisation loss for one or more score maps.

    Classification is a class-balanced binary cross-entropy over all
    candidates; the box terms (L1 on crop-normalised centre/size and
    ``1 - GIoU``) are averaged over positive candidates. ``gt`` holds frame
    coordinates, one box per score-map row.
    """
    raw = score_map.raw if score_map.raw is not None else torch.logit(score_map.scores)
    boxes = score_map.boxes
    if raw.dim() == 1:
        raw, boxes = raw.unsqueeze(0), boxes.unsqueeze(0)
    gt = _box_rows(gt)
    B, N = raw.shape
    crops = _crops_of(score_map, B)
    res = crops[0].output_resolution
    gt_crop = _gt_in_crop(gt, crops)
    pos = torch.from_numpy(positive_mask(gt_crop, N, res, positive_frac))
    labels = pos.to(raw.dtype)
    bce = nn.functional.binary_cross_entropy_with_logits(raw, labels, reduction="none")
    n_pos = pos.sum(dim=1)
    cls_terms = []
    for b in range(B):
        if n_pos[b] > 0:
            cls_terms.append(0.5 * bce[b][pos[b]].mean() + 0.5 * bce[b][~pos[b]].mean())
        else:
            cls_terms.append(bce[b].mean())
    cls = torch.stack(cls_terms).mean()

    zero = raw.sum() * 0
    if pos.any():
        target = torch.as_tensor(gt_crop, dtype=boxes.dtype)[:, None, :].expand_as(boxes)[pos]
        pred = boxes[pos]
        l1 = (xywh_to_cxcywh(pred) - xywh_to_cxcywh(target)).abs().mean() / res
        gl = (1 - giou_xywh(pred, target)).mean()
    else:
        l1, gl = zero, zero
    total = cls + lambda_l1 * l1 + lambda_giou * gl
    if return_terms:
        return total, {"cls": float(cls), "l1": float(l1), "giou": float(gl), "positives": int(n_pos.sum())}
    return total


@dataclass
class RolloutPair:
    sampled: Trajectory
    greedy: Trajectory

    @property
    def advantage(self) -> float:
        return float(self.sampled.reward) - float(self.greedy.reward)


def scst_rollout(model: SiameseTracker, episode, rng) -> RolloutPair:
    sampled = run_episode(model, episode, "sample", rng)
    greedy = run_episode(model, episode, "argmax", record=False)
    return RolloutPair(sampled, greedy)


def scst_loss(pair: RolloutPair) -> torch.Tensor:
    """Self-critical loss ``-(r - r') * sum_t log p(n_t)``; the advantage is a
    constant, gradients flow only through the sampled log-probabilities."""
    return -pair.advantage * pair.sampled.logprobs.sum()


def box_terms(traj: Trajectory, gt_boxes, score_maps: ScoreMap) -> tuple[torch.Tensor, torch.Tensor]:
    """L1 and ``1 - GIoU`` of the box predicted at each sampled candidate,
    averaged over frames whose sampled box overlaps the ground truth."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    boxes = score_maps.boxes
    zero = boxes.sum() * 0
    qualifying = iou_array(traj.boxes, gt_boxes) > 0
    if not qualifying.any():
        return zero, zero
    T = traj.T
    crops = _crops_of(score_maps, T)
    res = crops[0].output_resolution
    idx = torch.as_tensor(traj.indices, dtype=torch.long)
    pred = boxes[torch.arange(T), idx]
    target = torch.as_tensor(_gt_in_crop(gt_boxes, crops), dtype=boxes.dtype)
    q = torch.from_numpy(qualifying)
    l1 = (xywh_to_cxcywh(pred[q]) - xywh_to_cxcywh(target[q])).abs().mean() / res
    gl = (1 - giou_xywh(pred[q], target[q])).mean()
    return l1, gl


def combined_loss(pair: RolloutPair, gt_boxes, score_maps: ScoreMap, lambda_l1: float = 0.33, lambda_giou: float = 0.13) -> torch.Tensor:
    l1, gl = box_terms(pair.sampled, gt_boxes, score_maps)
    return scst_loss(pair) + lambda_l1 * l1 + lambda_giou * gl


# ---------------------------------------------------------------------------
# optimisation steps


@dataclass
class StepStats:
    loss: float
    mean_r_sample: float
    mean_r_greedy: float
    mean_advantage: float

    def row(self, step: int) -> dict:
        return {"step": step, "loss": self.loss, "mean_r_sample": self.mean_r_sample,
                "mean_r_greedy": self.mean_r_greedy, "mean_advantage": self.mean_advantage}


def set_norm_mode(model: nn.Module, freeze_norm_stats: bool) -> None:
    model.train()
    if freeze_norm_stats:
        for m in model.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.eval()


def _finish_step(model, optimizer, loss_value: float, grad_clip: float, context: str) -> None:
    if not math.isfinite(loss_value):
        raise TrainingDiverged(f"non-finite loss {loss_value} at {context}")
    params = [p for p in model.parameters() if p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip if grad_clip > 0 else float("inf"))
    if not torch.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm at {context}")
    optimizer.step()


def apply_scst_update(model, pairs: list[RolloutPair], gt_list, optimizer, cfg: TrainConfig, context: str = "") -> StepStats:
    """Backpropagate the batch-averaged combined loss and take one step."""
    optimizer.zero_grad(set_to_none=True)
    k = len(pairs)
    total = 0.0
    for pair, gt in zip(pairs, gt_list):
        traj, sm = attach_logprobs(model, pair.sampled)
        loss = combined_loss(RolloutPair(traj, pair.greedy), gt, sm, cfg.lambda_l1, cfg.lambda_giou) / k
        loss.backward()
        total += float(loss.detach())
    _finish_step(model, optimizer, total, cfg.grad_clip, context)
    return StepStats(
        loss=total,
        mean_r_sample=float(np.mean([p.sampled.reward for p in pairs])),
        mean_r_greedy=float(np.mean([p.greedy.reward for p in pairs])),
        mean_advantage=float(np.mean([p.advantage for p in pairs])),
    )


def slt_train_step(model: SiameseTracker, episodes, optimizer, rngs, cfg: TrainConfig, context: str = "") -> StepStats:
    """One update from ``k`` episodes.

    With the sequence-level objective on, each episode is played by the
    sampling and argmax trackers (same parameters) and the SCST loss is used.
    With it off, the argmax trajectory only supplies on-trajectory search
    regions for the frame-level loss.
    """
    set_norm_mode(model, cfg.freeze_norm_stats)
    gts = [e.gt_boxes for e in episodes]
    if cfg.sequence_objective:
        sampled = run_episodes(model, episodes, "sample", rngs)
        greedy = run_episodes(model, episodes, "argmax", record=False)
        pairs = [RolloutPair(s, g) for s, g in zip(sampled, greedy)]
        return apply_scst_update(model, pairs, gts, optimizer, cfg, context)

    greedy = run_episodes(model, episodes, "argmax")
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    for traj, gt in zip(greedy, gts):
        _, sm = replay(model, traj)
        loss = frame_level_loss(sm, gt, cfg.flt_lambda_l1, cfg.flt_lambda_giou, cfg.positive_frac) / len(episodes)
        loss.backward()
        total += float(loss.detach())
    _finish_step(model, optimizer, total, cfg.grad_clip, context)
    r = float(np.mean([t.reward for t in greedy]))
    return StepStats(loss=total, mean_r_sample=r, mean_r_greedy=r, mean_advantage=0.0)


def pair_batch_inputs(model: SiameseTracker, pairs: list[FramePair]):
    tcfg = model.cfg
    t_imgs, s_imgs, crops = [], [], []
    for p in pairs:
        fh, fw = p.template_frame.shape[:2]
        tc = search_region(p.template_box, tcfg.template_context, fw, fh, tcfg.template_size)
        t_imgs.append(tc.extract(p.template_frame))
        fh, fw = p.search_frame.shape[:2]
        sc = search_region(p.anchor_box, tcfg.search_context, fw, fh, tcfg.search_size)
        s_imgs.append(sc.extract(p.search_frame))
        crops.append(sc)
    return np.stack(t_imgs), np.stack(s_imgs), crops


def frame_pair_loss(model: SiameseTracker, pairs: list[FramePair], cfg: TrainConfig) -> torch.Tensor:
    t_imgs, s_imgs, crops = pair_batch_inputs(model, pairs)
    z = model.template_features(t_imgs)
    raw, scores, boxes = model(z, s_imgs)
    sm = ScoreMap(scores, boxes, crops, raw=raw)
    return frame_level_loss(sm, [p.gt_box for p in pairs], cfg.flt_lambda_l1, cfg.flt_lambda_giou, cfg.positive_frac)


def flt_train_step(model: SiameseTracker, pairs: list[FramePair], optimizer, cfg: TrainConfig, context: str = "") -> float:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = frame_pair_loss(model, pairs, cfg)
    loss.backward()
    value = float(loss.detach())
    _finish_step(model, optimizer, value, cfg.grad_clip, context)
    return value


# ---------------------------------------------------------------------------
# training loops


def episode_rng(seed: int, salt: int, epoch: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt, epoch, counter])


def exp_schedule(lr0: float, lr1: float, epoch: int, epochs: int) -> float:
    if epochs <= 1 or lr0 <= 0 or lr1 <= 0:
        return lr0
    return lr0 * (lr1 / lr0) ** (epoch / (epochs - 1))


def _set_lr(optimizer, lr: float) -> None:
    for g in optimizer.param_groups:
        g["lr"] = lr


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def quick_ao(model: SiameseTracker, videos: list[Video], max_frames: int | None = None) -> float:
    """Mean per-video AO of argmax tracking (frames after the first)."""
    was_training = model.training
    model.eval()
    aos = []
    for v in videos:
        ep = full_sequence_episode(v, 1)
        if max_frames is not None and ep.T > max_frames:
            ep.search_frames = ep.search_frames[:max_frames]
            ep.gt_boxes = ep.gt_boxes[:max_frames]
        traj = run_episode(model, ep, "argmax", record=False)
        aos.append(traj.reward)
    model.train(was_training)
    return float(np.mean(aos)) if aos else float("nan")


class StatsLog:
    """CSV log of per-step statistics; resuming keeps rows before the resume
    step and rewrites the rest."""

    def __init__(self, path, fields=STATS_FIELDS, resume_step: int = 0):
        self.path = Path(path)
        self.fields = fields
        rows = []
        if resume_step > 0 and self.path.exists():
            with open(self.path) as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) < resume_step]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=self.fields, lineterminator="\n").writerow(
                {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}
            )


def read_stats(path) -> list[dict]:
    with open(path) as f:
        return list(csv.DictReader(f))


@dataclass
class PretrainHistory:
    epochs: list[dict]
    step_losses: list[float]


def pretrain_frame_level(
    model: SiameseTracker,
    dataset: list[Video],
    cfg: TrainConfig,
    run_dir=None,
    val_dataset: list[Video] | None = None,
    val_frames: int | None = 100,
    lineage: dict | None = None,
) -> PretrainHistory:
    """Frame-level supervised training on template/search pairs whose search
    window is centred on a perturbed ground-truth box.

    Per-epoch validation loss and validation AO are recorded; with
    ``run_dir`` set they are written to ``pretrain_epochs.csv`` and a
    checkpoint is saved after every epoch.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    optimizer = make_optimizer(model, cfg.pretrain_lr)
    pcfg = cfg.perturb_config()
    val_source = val_dataset if val_dataset else dataset
    val_rng = np.random.default_rng([cfg.seed, _VAL_SALT])
    val_pairs = [sample_frame_pair(val_source, pcfg, val_rng) for _ in range(cfg.val_pairs)]
    history = PretrainHistory([], [])
    epoch_log = None
    if run_dir is not None:
        epoch_log = StatsLog(run_dir / "pretrain_epochs.csv", ("epoch", "train_loss", "val_loss", "val_ao"))
        step_log = StatsLog(run_dir / "pretrain_steps.csv", ("step", "loss"))
    step = 0
    for epoch in range(cfg.pretrain_epochs):
        _set_lr(optimizer, exp_schedule(cfg.pretrain_lr, cfg.pretrain_lr_final, epoch, cfg.pretrain_epochs))
        losses = []
        for s in range(cfg.pretrain_steps_per_epoch):
            base = step * cfg.pretrain_batch
            pairs = [
                sample_frame_pair(dataset, pcfg, episode_rng(cfg.seed, _PRETRAIN_SALT, epoch, base + j))
                for j in range(cfg.pretrain_batch)
            ]
            loss = flt_train_step(model, pairs, optimizer, cfg, context=f"pretrain step {step}")
            losses.append(loss)
            history.step_losses.append(loss)
            if run_dir is not None:
                step_log.append({"step": step, "loss": loss})
            step += 1
        model.eval()
        with torch.no_grad():
            val_loss = float(np.mean([float(frame_pair_loss(model, val_pairs[i : i + 16], cfg)) for i in range(0, len(val_pairs), 16)])) if val_pairs else float("nan")
        val_ao = quick_ao(model, val_source[:8], val_frames) if val_source else float("nan")
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"), "val_loss": val_loss, "val_ao": val_ao}
        history.epochs.append(rec)
        log.info("pretrain epoch %d: %s", epoch, rec)
        if run_dir is not None:
            epoch_log.append(rec)
            meta = {"epoch": epoch + 1, "config": config_mod.dump(cfg), "lineage": lineage or {}}
            save_checkpoint(run_dir / f"pretrain_epoch{epoch + 1:03d}.ckpt", model, "pretrain", meta=meta)
    if run_dir is not None:
        meta = {"epoch": cfg.pretrain_epochs, "config": config_mod.dump(cfg), "lineage": lineage or {}}
        save_checkpoint(run_dir / "pretrain_final.ckpt", model, "pretrain", meta=meta)
    model.eval()
    return history


def sample_slt_batch(dataset, cfg: TrainConfig, epoch: int, step: int):
    """Episodes and sampling streams for one step; one stream per episode."""
    episodes, rngs = [], []
    for j in range(cfg.k):
        rng = episode_rng(cfg.seed, _SLT_SALT, epoch, step * cfg.k + j)
        episodes.append(sample_episode(dataset, cfg.T, cfg.max_interval, rng))
        rngs.append(rng)
    return episodes, rngs


def sample_flt_batch(dataset, cfg: TrainConfig, epoch: int, step: int):
    return [
        sample_frame_pair(dataset, cfg.perturb_config(), episode_rng(cfg.seed, _SLT_SALT, epoch, step * cfg.k + j))
        for j in range(cfg.k)
    ]


def train_slt(
    model: SiameseTracker,
    dataset: list[Video],
    cfg: TrainConfig,
    run_dir=None,
    resume=None,
    max_steps: int | None = None,
    lineage: dict | None = None,
) -> list[StepStats]:
    """Sequence-level fine-tuning loop (also runs the frame-level and
    sampling-only ablation variants, selected by the config toggles).

    ``resume`` is a checkpoint written by this loop; training continues at
    the stored step with the restored optimizer state. ``max_steps`` stops
    early (after that many total steps) without changing the schedule.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    optimizer = make_optimizer(model, cfg.lr)
    start = 0
    if resume is not None:
        _, header = load_checkpoint(resume, model, optimizer)
        start = int(header["meta"]["step"])
    total = cfg.total_steps if max_steps is None else min(cfg.total_steps, max_steps)
    stats_log = StatsLog(run_dir / "stats.csv", resume_step=start) if run_dir is not None else None
    frame_level = not cfg.sequence_sampling
    out = []
    for step in range(start, total):
        epoch = step // cfg.steps_per_epoch
        _set_lr(optimizer, exp_schedule(cfg.lr, cfg.lr_final, epoch, cfg.epochs))
        if frame_level:
            pairs = sample_flt_batch(dataset, cfg, epoch, step)
            loss = flt_train_step(model, pairs, optimizer, cfg, context=f"step {step}")
            stats = StepStats(loss, float("nan"), float("nan"), 0.0)
        else:
            episodes, rngs = sample_slt_batch(dataset, cfg, epoch, step)
            stats = slt_train_step(model, episodes, optimizer, rngs, cfg, context=f"step {step}")
        out.append(stats)
        if stats_log is not None:
            stats_log.append(stats.row(step))
        done = step + 1
        if run_dir is not None and (done % cfg.checkpoint_every == 0 or done == total):
            meta = {"step": done, "epoch": epoch, "config": config_mod.dump(cfg), "lineage": lineage or {}}
            save_checkpoint(run_dir / f"slt_step{done:06d}.ckpt", model, "slt", optimizer, meta)
    model.eval()
    return out
