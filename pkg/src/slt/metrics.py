"""Sequence-level tracking metrics and the episode reward."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxgeom import Box, iou_array

SUMMARY_FIELDS = ("ao", "sr_050", "sr_075", "success_auc", "precision", "norm_precision")


def _values(s) -> np.ndarray:
    v = np.asarray(s, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("overlap sequence is empty")
    return v


def _box_array(boxes) -> np.ndarray:
    if len(boxes) and isinstance(boxes[0], Box):
        return np.array([b.as_array() for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def average_overlap(s) -> float:
    return float(_values(s).mean())


def success_rate(s, tau: float) -> float:
    v = _values(s)
    return float(np.count_nonzero(v > tau) / v.size)


def success_curve(s, n_thresholds: int = 21) -> tuple[np.ndarray, np.ndarray]:
    """Thresholds evenly spaced on [0, 1] and the success rate at each.
    Comparison is strict, except that a perfect overlap passes every
    threshold, so a perfect tracker scores 1 on any grid."""
    if n_thresholds < 2:
        raise ValueError("n_thresholds must be at least 2")
    v = _values(s)
    thr = np.linspace(0.0, 1.0, n_thresholds)
    rates = ((v[None, :] > thr[:, None]) | (v[None, :] >= 1.0)).mean(axis=1)
    return thr, rates


def success_auc(s, n_thresholds: int = 21) -> float:
    return float(success_curve(s, n_thresholds)[1].mean())


def precision(errors, threshold: float = 20.0) -> float:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("error list is empty")
    return float(np.count_nonzero(e <= threshold) / e.size)


def center_errors(pred, gt) -> np.ndarray:
    p, g = _box_array(pred), _box_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} ground-truth boxes")
    d = (p[:, :2] + p[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2)
    return np.hypot(d[:, 0], d[:, 1])


def normalized_center_errors(pred, gt) -> np.ndarray:
    p, g = _box_array(pred), _box_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} ground-truth boxes")
    if len(g) == 0:
        raise ValueError("box lists are empty")
    if np.any(g[:, 2] <= 0) or np.any(g[:, 3] <= 0):
        raise ValueError("ground-truth boxes must have positive area")
    d = ((p[:, :2] + p[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2)) / g[:, 2:]
    return np.hypot(d[:, 0], d[:, 1])


# 51 thresholds on [0, 0.5]; computed as (i * 0.5) / 50 so grid points are exact
NORM_PRECISION_THRESHOLDS = np.arange(51) * 0.5 / 50


def normalized_precision_auc(pred, gt) -> float:
    err = normalized_center_errors(pred, gt)
    # strict comparison; an exact centre hit passes the zero threshold too
    hits = (err[None, :] < NORM_PRECISION_THRESHOLDS[:, None]) | (err[None, :] == 0.0)
    return float(hits.mean(axis=1).mean())


def overlaps(pred, gt) -> np.ndarray:
    p, g = _box_array(pred), _box_array(gt)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} ground-truth boxes")
    return iou_array(p, g)


def episode_reward(pred, gt) -> float:
    """Average overlap of a predicted trajectory against its annotation."""
    o = overlaps(pred, gt)
    if o.size == 0:
        raise ValueError("episode has no frames")
    return float(o.mean())


@dataclass
class SequenceScores:
    ao: float
    sr_050: float
    sr_075: float
    success_auc: float
    precision: float
    norm_precision: float


def score_sequence(pred, gt, n_thresholds: int = 21, precision_threshold: float = 20.0) -> SequenceScores:
    o = overlaps(pred, gt)
    return SequenceScores(
        ao=average_overlap(o),
        sr_050=success_rate(o, 0.5),
        sr_075=success_rate(o, 0.75),
        success_auc=success_auc(o, n_thresholds),
        precision=precision(center_errors(pred, gt), precision_threshold),
        norm_precision=normalized_precision_auc(pred, gt),
    )


@dataclass
class EvalReport:
    ao: float
    sr_050: float
    sr_075: float
    success_auc: float
    precision: float
    norm_precision: float
    per_sequence_breakdown: dict[str, SequenceScores] = field(default_factory=dict)

    @classmethod
    def aggregate(cls, per_sequence: dict[str, SequenceScores]) -> "EvalReport":
        if not per_sequence:
            raise ValueError("cannot aggregate an empty report")
        # sorted keys make the float sum independent of insertion order
        keys = sorted(per_sequence)
        means = {
            f: float(np.mean([getattr(per_sequence[k], f) for k in keys])) for f in SUMMARY_FIELDS
        }
        return cls(**means, per_sequence_breakdown={k: per_sequence[k] for k in keys})

    def summary(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in SUMMARY_FIELDS}

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_sequence_breakdown"] = {k: asdict(v) for k, v in self.per_sequence_breakdown.items()}
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        seqs = {k: SequenceScores(**v) for k, v in d.get("per_sequence_breakdown", {}).items()}
        return cls(**{f: float(d[f]) for f in SUMMARY_FIELDS}, per_sequence_breakdown=seqs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sequence",) + SUMMARY_FIELDS)
        for k, v in self.per_sequence_breakdown.items():
            w.writerow((k,) + tuple(repr(getattr(v, f)) for f in SUMMARY_FIELDS))
        w.writerow(("__aggregate__",) + tuple(repr(getattr(self, f)) for f in SUMMARY_FIELDS))
        return buf.getvalue()

