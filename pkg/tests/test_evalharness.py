import dataclasses
import json

import numpy as np
import pytest
import torch

from conftest import tiny_model
from slt.checkpoint import save_checkpoint
from slt.config import EvalProtocol, TrainConfig
from slt.episodes import Video, load_dataset, write_dataset
from slt.evalharness import (
    VARIANTS,
    RunManifest,
    ablation_suite,
    ablation_table,
    file_sha256,
    frame_rate_sweep,
    load_annotations_only,
    oracle_tracker,
    plot_success,
    read_dump,
    read_manifest,
    report_from_dumps,
    run_ope,
    success_curves,
    sweep_table,
    track_video,
    tracked_indices,
    variant_config,
    write_ope,
    write_sweep,
)


def test_tracked_indices():
    assert tracked_indices(10, 1) == list(range(10))
    assert tracked_indices(10, 3) == [0, 3, 6, 9]
    assert tracked_indices(2, 5) == [0]


def test_oracle_tracker_scores_perfectly(videos):
    for i in (1, 3, 10):
        res = run_ope(None, videos, EvalProtocol(interval=i), tracker_fn=oracle_tracker)
        assert res.report.ao == 1.0 and res.report.success_auc == 1.0
        assert res.report.precision == 1.0 and res.report.norm_precision == 1.0


def test_interval_one_is_the_default_tracking_loop(videos):
    m = tiny_model(20, dtype=torch.float32)
    res = run_ope(m, videos, EvalProtocol(interval=1))
    for v in videos:
        assert np.array_equal(res.boxes[v.id], track_video(m, v, 1))


def test_interval_three_matches_manual_subsampling(videos):
    m = tiny_model(21, dtype=torch.float32)
    res = run_ope(m, videos, EvalProtocol(interval=3))
    for v in videos:
        idx = tracked_indices(len(v), 3)
        sub = Video(v.id, [v.frames[j] for j in idx], v.boxes[idx])
        assert np.array_equal(res.boxes[v.id], track_video(m, sub, 1))
        assert np.array_equal(res.gt[v.id], v.boxes[idx])


def test_first_frame_excluded_from_scores(videos):
    # a tracker that is wrong everywhere but frame 0 scores zero
    def bad(video, i):
        b = np.asarray(video.boxes, dtype=np.float64)[tracked_indices(len(video), i)].copy()
        b[1:, :2] += 500
        return b

    assert run_ope(None, videos, tracker_fn=bad).report.ao == 0.0


def test_short_sequences_skipped(videos):
    short = Video("short", videos[0].frames[:3], videos[0].boxes[:3])
    res = run_ope(None, [short, videos[1]], EvalProtocol(interval=5), tracker_fn=oracle_tracker)
    assert res.skipped == ["short"] and list(res.boxes) == [videos[1].id]
    with pytest.raises(ValueError):
        run_ope(None, [short], EvalProtocol(interval=5), tracker_fn=oracle_tracker)
    with pytest.raises(ValueError):
        run_ope(None, [], tracker_fn=oracle_tracker)


def test_tracker_fn_length_checked(videos):
    with pytest.raises(ValueError, match="tracked frames"):
        run_ope(None, videos, tracker_fn=lambda v, i: np.zeros((2, 4)))


def test_dumps_recompute_report(videos, tmp_path):
    m = tiny_model(22, dtype=torch.float32)
    res = run_ope(m, videos, EvalProtocol(interval=2))
    out = write_ope(res, tmp_path / "ev")
    assert json.loads((out / "report.json").read_text())["ao"] == res.report.ao
    write_dataset(videos, tmp_path / "data")
    annotations = load_annotations_only(tmp_path / "data")
    again = report_from_dumps(out / "results", annotations, res.protocol)
    assert again == res.report
    for v in videos:
        assert np.array_equal(read_dump(out / "results" / f"{v.id}.txt"), res.boxes[v.id])


def test_sweep_at_one_equals_run_ope(videos):
    m = tiny_model(23, dtype=torch.float32)
    rows = frame_rate_sweep({"m": m}, videos, [1])
    ref = run_ope(m, videos, EvalProtocol(interval=1))
    assert rows[0].result.report == ref.report
    for k in ref.boxes:
        assert np.array_equal(rows[0].result.boxes[k], ref.boxes[k])


def test_sweep_rejects_bad_intervals(videos):
    with pytest.raises(ValueError):
        frame_rate_sweep({"o": oracle_tracker}, videos, [0])
    with pytest.raises(ValueError):
        frame_rate_sweep({"o": oracle_tracker}, videos, [11])


def test_sweep_outputs(videos, tmp_path):
    rows = frame_rate_sweep({"oracle": oracle_tracker}, videos, [1, 4])
    assert [(r.model, r.interval, r.ao) for r in rows] == [("oracle", 1, 1.0), ("oracle", 4, 1.0)]
    assert sweep_table(rows).splitlines()[0] == "model,interval,ao,success_auc"
    out = write_sweep(rows, tmp_path)
    assert (out / "oracle" / "interval04" / "report.json").exists()


def test_success_curves_and_plot(videos, tmp_path):
    res = run_ope(None, videos, tracker_fn=oracle_tracker)
    thr, rate = success_curves(res)
    assert len(thr) == 101 and np.all(rate == 1.0)
    p = plot_success({"oracle": (thr, rate)}, tmp_path / "plot.png")
    assert p.read_bytes()[:4] == b"\x89PNG"


def test_variant_configs():
    base = TrainConfig(max_interval=7)
    b = variant_config(base, "Baseline")
    assert not b.sequence_sampling and not b.sequence_objective and b.max_interval == 1
    ss = variant_config(base, "+SS")
    assert ss.sequence_sampling and not ss.sequence_objective and ss.max_interval == 1
    so = variant_config(base, "+SS+SO")
    assert so.sequence_objective and so.max_interval == 1
    full = variant_config(base, "+SS+SO+SA")
    assert full.sequence_objective and full.max_interval == 7
    # every variant keeps the remaining hyper-parameters
    for v in VARIANTS:
        c = variant_config(base, v)
        assert (c.seed, c.T, c.k, c.lr, c.epochs) == (base.seed, base.T, base.k, base.lr, base.epochs)
    with pytest.raises(ValueError):
        variant_config(base, "+SA")


def test_sa_off_equals_interval_one_training(videos, tmp_path):
    # +SS+SO with SA off is the same run as the full variant at max_interval 1
    from slt.engine import train_slt
    from slt.checkpoint import load_checkpoint

    m = tiny_model(24, dtype=torch.float32)
    ck = tmp_path / "pre.ckpt"
    save_checkpoint(ck, m, "pretrain")
    base = TrainConfig(T=3, k=2, epochs=1, videos_per_epoch=4, max_interval=5)
    a, _ = load_checkpoint(ck)
    b, _ = load_checkpoint(ck)
    sa = train_slt(a, videos, variant_config(base, "+SS+SO"))
    full = train_slt(b, videos, variant_config(dataclasses.replace(base, max_interval=1), "+SS+SO+SA"))
    assert [s.row(0) for s in sa] == [s.row(0) for s in full]


def test_ablation_suite_rows_and_deltas(videos, tmp_path):
    m = tiny_model(25, dtype=torch.float32)
    ck = tmp_path / "pre.ckpt"
    save_checkpoint(ck, m, "pretrain")
    base = TrainConfig(T=3, k=2, epochs=1, videos_per_epoch=4, max_interval=3, checkpoint_every=1)
    rows = ablation_suite(videos, videos, base, ck, tmp_path / "abl")
    assert [r.variant for r in rows] == list(VARIANTS)
    assert rows[0].delta == 0.0
    for r in rows:
        assert r.delta == pytest.approx(r.ao - rows[0].ao, abs=0)
        assert r.checkpoint is not None
    table = (tmp_path / "abl" / "ablation.csv").read_text()
    assert table == ablation_table(rows)
    assert (tmp_path / "abl" / "ss_so_sa" / "eval" / "report.json").exists()


def test_manifest_id_and_lineage(tmp_path):
    m = tiny_model(26, dtype=torch.float32)
    parent = tmp_path / "a.ckpt"
    save_checkpoint(parent, m, "pretrain")
    child = tmp_path / "b.ckpt"
    save_checkpoint(child, m, "slt", meta={"lineage": {"pretrained": str(parent)}})
    man = RunManifest("eval", 3, {"interval": 1})
    man.add_checkpoint(child)
    man.add_dataset("data", "abc")
    path = man.write(tmp_path / "run")
    d = read_manifest(path)
    assert d["run_id"] == man.run_id and len(d["run_id"]) == 16
    assert d["lineage"][0]["parent"] == {"pretrained": str(parent)}
    assert d["lineage"][0]["sha256"] == file_sha256(child)
    again = RunManifest("eval", 3, {"interval": 1})
    again.add_checkpoint(child)
    again.add_dataset("data", "abc")
    assert again.assign_id() == man.run_id
    assert RunManifest("eval", 4, {"interval": 1}).assign_id() != man.run_id


def test_dataset_written_and_reloaded_evaluates_identically(videos, tmp_path):
    m = tiny_model(27, dtype=torch.float32)
    write_dataset(videos, tmp_path)
    loaded = load_dataset(tmp_path)
    a = run_ope(m, videos)
    b = run_ope(m, loaded)
    assert a.report == b.report
