"""One-pass evaluation, the low-frame-rate protocol, ablations and run
manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .checkpoint import load_checkpoint
from .config import EvalProtocol, TrainConfig
from .episodes import Video, full_sequence_episode, load_video, write_boxes
from .metrics import EvalReport, SequenceScores, overlaps, score_sequence, success_curve
from .tracker import SiameseTracker, run_episode, start_state, track_step

log = logging.getLogger(__name__)

RESULTS_DIR = "results"


# ---------------------------------------------------------------------------
# manifests


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict = field(default_factory=dict)
    datasets: list = field(default_factory=list)
    lineage: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    run_id: str = ""

    def assign_id(self) -> str:
        """Fix the run id from the inputs recorded so far (idempotent)."""
        if not self.run_id:
            body = json.dumps([self.command, self.seed, self.config, self.datasets, self.lineage], sort_keys=True, default=str)
            self.run_id = hashlib.sha256(body.encode()).hexdigest()[:16]
        return self.run_id

    def add_dataset(self, path, fingerprint: str) -> None:
        self.datasets.append({"path": str(path), "sha256": fingerprint})

    def add_checkpoint(self, path) -> None:
        """Record ``path`` and the lineage stored in its header."""
        from .checkpoint import read_container

        header, _ = read_container(path)
        entry = {"path": str(path), "sha256": file_sha256(path), "stage": header["stage"]}
        parent = header.get("meta", {}).get("lineage") or {}
        if parent:
            entry["parent"] = parent
        self.lineage.append(entry)

    def to_dict(self) -> dict:
        self.assign_id()
        return dataclasses.asdict(self)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# one-pass evaluation


def tracked_indices(length: int, interval: int) -> list[int]:
    return list(range(0, length, interval))


def track_video(model: SiameseTracker, video: Video, interval: int = 1) -> np.ndarray:
    """Plain online tracking loop: initialise on frame 0 and call
    :func:`track_step` on every ``interval``-th frame. Returns the boxes of all
    tracked frames, the first being the initial ground truth."""
    model.eval()
    idx = tracked_indices(len(video), interval)
    out = np.zeros((len(idx), 4))
    out[0] = video.boxes[0]
    with torch.no_grad():
        state = start_state(model, video.frames[0], video.box(0))
        for j, f in enumerate(idx[1:], start=1):
            box, _, state, _ = track_step(model, state, video.frames[f], "argmax")
            out[j] = box.as_array()
    return out


@dataclass
class OPEResult:
    report: EvalReport
    boxes: dict[str, np.ndarray]
    gt: dict[str, np.ndarray]
    skipped: list[str]
    protocol: EvalProtocol


def _score(pred: np.ndarray, gt: np.ndarray, protocol: EvalProtocol) -> SequenceScores:
    # the initial frame is given, not predicted, and is left out of the metrics
    return score_sequence(pred[1:], gt[1:], protocol.thresholds, protocol.precision_threshold)


def run_ope(model: SiameseTracker, dataset, protocol: EvalProtocol | None = None, tracker_fn=None) -> OPEResult:
    """Argmax tracking over frames ``0, i, 2i, ...`` of every sequence,
    initialised with the ground truth at frame 0.

    ``tracker_fn(video, interval) -> boxes`` replaces the model (used for
    oracle trackers); it must return one box per tracked frame.
    """
    protocol = protocol or EvalProtocol()
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    i = protocol.interval
    per_seq, boxes, gts, skipped = {}, {}, {}, []
    if model is not None:
        model.eval()
    for video in dataset:
        idx = tracked_indices(len(video), i)
        if len(idx) < 2:
            log.warning("skipping %s: only %d tracked frame(s) at interval %d", video.id, len(idx), i)
            skipped.append(video.id)
            continue
        gt = np.asarray(video.boxes, dtype=np.float64)[idx]
        if tracker_fn is not None:
            pred = np.asarray(tracker_fn(video, i), dtype=np.float64).reshape(-1, 4)
        else:
            traj = run_episode(model, full_sequence_episode(video, i), "argmax", record=False)
            pred = np.concatenate([gt[:1], traj.boxes])
        if len(pred) != len(gt):
            raise ValueError(f"{video.id}: tracker returned {len(pred)} boxes for {len(gt)} tracked frames")
        boxes[video.id] = pred
        gts[video.id] = gt
        per_seq[video.id] = _score(pred, gt, protocol)
    if not per_seq:
        raise ValueError("no sequence has two tracked frames under this protocol")
    return OPEResult(EvalReport.aggregate(per_seq), boxes, gts, skipped, protocol)


def oracle_tracker(video: Video, interval: int) -> np.ndarray:
    return np.asarray(video.boxes, dtype=np.float64)[tracked_indices(len(video), interval)]


def write_ope(result: OPEResult, out_dir, name: str = "report") -> Path:
    """Per-sequence box dumps under ``results/`` plus JSON and CSV reports."""
    out = Path(out_dir)
    rdir = out / RESULTS_DIR
    rdir.mkdir(parents=True, exist_ok=True)
    for seq, boxes in result.boxes.items():
        write_boxes(rdir / f"{seq}.txt", boxes)
    (out / f"{name}.json").write_text(result.report.to_json(indent=1) + "\n")
    (out / f"{name}.csv").write_text(result.report.to_csv())
    (out / "protocol.txt").write_text(config_mod.dump(result.protocol))
    return out


def read_dump(path) -> np.ndarray:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, 4)


def report_from_dumps(results_dir, dataset, protocol: EvalProtocol) -> EvalReport:
    """Recompute an :class:`EvalReport` from dumped boxes and the annotations."""
    results_dir = Path(results_dir)
    per_seq = {}
    for video in dataset:
        path = results_dir / f"{video.id}.txt"
        if not path.exists():
            continue
        pred = read_dump(path)
        gt = np.asarray(video.boxes, dtype=np.float64)[tracked_indices(len(video), protocol.interval)]
        per_seq[video.id] = _score(pred, gt, protocol)
    return EvalReport.aggregate(per_seq)


def load_annotations_only(root) -> list[Video]:
    """Videos whose frames are never touched (for recomputing reports)."""
    return [load_video(p) for p in sorted(Path(root).iterdir()) if p.is_dir()]


# ---------------------------------------------------------------------------
# plots


def success_curves(result: OPEResult, n_thresholds: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """Thresholds and the success curve averaged over sequences (each curve
    over that sequence's scored frames)."""
    curves = []
    for seq in result.boxes:
        ov = overlaps(result.boxes[seq][1:], result.gt[seq][1:])
        thr, rate = success_curve(ov, n_thresholds)
        curves.append(rate)
    return thr, np.mean(curves, axis=0)


def plot_success(curves: dict[str, tuple[np.ndarray, np.ndarray]], path, title: str = "Success plot") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for name, (thr, rate) in curves.items():
        ax.plot(thr, rate, label=f"{name} [{float(np.mean(rate)):.3f}]")
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# frame-rate sweep


@dataclass
class SweepRow:
    model: str
    interval: int
    ao: float
    success_auc: float
    result: OPEResult


def frame_rate_sweep(models: dict, dataset, intervals, protocol: EvalProtocol | None = None) -> list[SweepRow]:
    """:func:`run_ope` for every (model, interval). A model entry may be a
    :class:`SiameseTracker` or a ``tracker_fn`` callable."""
    base = protocol or EvalProtocol()
    intervals = [int(i) for i in intervals]
    if any(not 1 <= i <= 10 for i in intervals):
        raise ValueError("intervals must lie in 1..10")
    rows = []
    for name, m in models.items():
        for i in intervals:
            p = dataclasses.replace(base, interval=i)
            if isinstance(m, SiameseTracker):
                res = run_ope(m, dataset, p)
            else:
                res = run_ope(None, dataset, p, tracker_fn=m)
            rows.append(SweepRow(name, i, res.report.ao, res.report.success_auc, res))
    return rows


def sweep_table(rows: list[SweepRow]) -> str:
    lines = ["model,interval,ao,success_auc"]
    for r in rows:
        lines.append(f"{r.model},{r.interval},{r.ao!r},{r.success_auc!r}")
    return "\n".join(lines) + "\n"


def write_sweep(rows: list[SweepRow], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in rows:
        write_ope(r.result, out / r.model / f"interval{r.interval:02d}")
    (out / "sweep.csv").write_text(sweep_table(rows))
    return out


# ---------------------------------------------------------------------------
# ablation of the sequence-level components

VARIANTS = ("Baseline", "+SS", "+SS+SO", "+SS+SO+SA")


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    """Config of one ablation variant.

    Baseline continues frame-level training; +SS trains on the tracker's own
    search regions with the frame-level loss; +SS+SO swaps in the
    self-critical loss; +SS+SO+SA also samples frame intervals up to
    ``base.max_interval`` (SA off is exactly ``max_interval = 1``).
    """
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    ss = name != "Baseline"
    so = "SO" in name
    sa = "SA" in name
    return dataclasses.replace(
        base,
        sequence_sampling=ss,
        sequence_objective=so,
        max_interval=base.max_interval if sa else 1,
    )


@dataclass
class AblationRow:
    variant: str
    ao: float
    delta: float
    report: EvalReport
    checkpoint: str | None = None


def ablation_table(rows: list[AblationRow]) -> str:
    fields = ("ao", "sr_050", "sr_075", "success_auc", "precision", "norm_precision")
    lines = ["variant," + ",".join(fields) + ",delta_ao"]
    for r in rows:
        s = r.report.summary()
        lines.append(r.variant + "," + ",".join(f"{s[f]!r}" for f in fields) + f",{r.delta!r}")
    return "\n".join(lines) + "\n"


def ablation_suite(
    train_dataset,
    test_dataset,
    base_cfg: TrainConfig,
    pretrained,
    out_dir=None,
    variants=VARIANTS,
    protocol: EvalProtocol | None = None,
    max_steps: int | None = None,
) -> list[AblationRow]:
    """Train every variant from the same pre-trained checkpoint with the same
    seed, evaluate on ``test_dataset`` and report AO deltas against the
    baseline (or the first variant when the baseline is not run)."""
    from .engine import train_slt

    protocol = protocol or EvalProtocol()
    pretrained = Path(pretrained)
    rows = []
    for name in variants:
        cfg = variant_config(base_cfg, name)
        model, _ = load_checkpoint(pretrained)
        run_dir = Path(out_dir) / _slug(name) if out_dir is not None else None
        lineage = {"pretrained": str(pretrained), "sha256": file_sha256(pretrained)}
        train_slt(model, train_dataset, cfg, run_dir, max_steps=max_steps, lineage=lineage)
        res = run_ope(model, test_dataset, protocol)
        ckpt = None
        if run_dir is not None:
            write_ope(res, run_dir / "eval")
            (run_dir / "config.txt").write_text(config_mod.dump(cfg))
            done = sorted(run_dir.glob("slt_step*.ckpt"))
            ckpt = str(done[-1]) if done else None
        rows.append(AblationRow(name, res.report.ao, 0.0, res.report, ckpt))
    ref = rows[0].ao
    for r in rows:
        r.delta = r.ao - ref
    if out_dir is not None:
        Path(out_dir, "ablation.csv").write_text(ablation_table(rows))
    return rows


def _slug(name: str) -> str:
    return "baseline" if name == "Baseline" else name.strip("+").replace("+", "_").lower()


# ---------------------------------------------------------------------------
# desk-scale experiment: SLT gain and robustness to low frame rates


@dataclass
class DeskScaleConfig:
    seed: int = 0
    train_videos: int = 40
    train_frames: int = 250
    test_videos: int = 50
    test_frames: int = 150
    slt_steps: int = 150
    sa_max_interval: int = 10
    eval_intervals: tuple[int, ...] = (1, 3)
    # targets fast enough that skipping frames moves them across much of the search region
    scene: dict = field(default_factory=lambda: {"target_speed": (1.5, 6.0)})
    # short episodes in large batches: far fewer updates than a full-scale run,
    # so each one needs a low-variance gradient estimate
    train: dict = field(default_factory=lambda: {"pretrain_epochs": 4, "pretrain_steps_per_epoch": 200, "T": 8, "k": 64})


def desk_scale_run(dcfg: DeskScaleConfig, out_dir=None) -> dict:
    """Pre-train a tracker frame-level, fine-tune it sequence-level with and
    without interval augmentation, and evaluate all three on held-out videos
    at every interval in ``dcfg.eval_intervals``. Returns AO per model and
    interval."""
    from .checkpoint import save_checkpoint
    from .engine import pretrain_frame_level, train_slt
    from .episodes import SyntheticSceneConfig, generate_synthetic_dataset, materialize

    torch.manual_seed(dcfg.seed)
    scene = dict(dcfg.scene)
    train_scene = SyntheticSceneConfig(**{**scene, "num_frames": dcfg.train_frames, "seed": 1000 + dcfg.seed})
    test_scene = SyntheticSceneConfig(**{**scene, "num_frames": dcfg.test_frames, "seed": 5000 + dcfg.seed})
    train = [materialize(v) for v in generate_synthetic_dataset(train_scene, dcfg.train_videos, "train")]
    test = [materialize(v) for v in generate_synthetic_dataset(test_scene, dcfg.test_videos, "test")]

    cfg = TrainConfig(seed=dcfg.seed, **dcfg.train)
    out = Path(out_dir) if out_dir is not None else None
    model = SiameseTracker(cfg.tracker_config())
    pretrain_frame_level(model, train, cfg, out / "pretrain" if out else None, val_frames=100)
    pre_path = (out if out else Path(_tmpdir())) / "pretrained.ckpt"
    save_checkpoint(pre_path, model, "pretrain", meta={"config": config_mod.dump(cfg)})

    steps_cfg = dict(epochs=1, videos_per_epoch=cfg.k * dcfg.slt_steps)
    models = {"pretrained": model}
    for name, mi in (("slt_sa", dcfg.sa_max_interval), ("slt_nosa", 1)):
        c = dataclasses.replace(cfg, max_interval=mi, **steps_cfg)
        m, _ = load_checkpoint(pre_path)
        train_slt(m, train, c, out / name if out else None, lineage={"pretrained": str(pre_path)})
        models[name] = m
    results = {}
    for name, m in models.items():
        for i in dcfg.eval_intervals:
            res = run_ope(m, test, EvalProtocol(interval=i))
            results[f"{name}/i{i}"] = res.report.ao
            if out is not None:
                write_ope(res, out / "eval" / name / f"interval{i:02d}")
    if out is not None:
        (out / "desk_results.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    return results


def _tmpdir() -> str:
    import tempfile

    return tempfile.mkdtemp(prefix="slt-desk-")

