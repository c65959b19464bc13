"""Command-line entry point.

Every command resolves its configuration as: defaults, then the ``--config``
file, then ``--set key=value`` overrides, then the dedicated flags
(``--seed``, ``--interval``). Each run writes ``manifest.json`` into its
output directory, which defaults to ``$SLT_OUT_ROOT/<command>-<run id>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, EvalProtocol, TrainConfig
from .episodes import (
    DatasetError,
    SamplingError,
    SyntheticSceneConfig,
    dataset_fingerprint,
    generate_synthetic_dataset,
    load_dataset,
    write_dataset,
)
from .evalharness import (
    VARIANTS,
    RunManifest,
    ablation_suite,
    frame_rate_sweep,
    plot_success,
    run_ope,
    success_curves,
    write_ope,
    write_sweep,
)

log = logging.getLogger("slt")

COMMANDS = ("synth-gen", "pretrain", "slt", "eval", "ablate", "sweep", "grad-check")
DEFAULT_OUT_ROOT = "runs"
# keys that are not fields of a config dataclass but are accepted by a command
_EXTRA_KEYS = {
    "synth-gen": {"num_videos": (int, 20), "prefix": (str, "synth")},
    "grad-check": {"num_samples": (int, 100_000), "N": (int, 3), "T": (int, 3)},
}


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value configuration file")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--dataset", metavar="PATH", help="dataset root")
    common.add_argument("--checkpoint", metavar="PATH", action="append", help="checkpoint file (repeatable for sweep)")
    common.add_argument("--interval", type=int, help="evaluation frame interval")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides", help="override one configuration key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="slt", description="Sequence-level training and evaluation of a toy Siamese tracker.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("synth-gen", parents=[common], help="generate a synthetic tracking dataset")
    sub.add_parser("pretrain", parents=[common], help="frame-level pre-training")
    s = sub.add_parser("slt", parents=[common], help="sequence-level fine-tuning")
    s.add_argument("--resume", metavar="PATH", help="continue from a checkpoint written by this command")
    s.add_argument("--from-scratch", action="store_true", help="start from random weights instead of --checkpoint")
    s.add_argument("--max-steps", type=int, help="stop after this many total steps")
    s.add_argument("--eval-dataset", metavar="PATH", help="evaluate the final model on this dataset")
    sub.add_parser("eval", parents=[common], help="one-pass evaluation")
    a = sub.add_parser("ablate", parents=[common], help="train and compare the ablation variants")
    a.add_argument("--eval-dataset", metavar="PATH", required=True)
    a.add_argument("--max-steps", type=int)
    a.add_argument("--variants", default=",".join(VARIANTS), help="comma-separated subset of " + ", ".join(VARIANTS))
    w = sub.add_parser("sweep", parents=[common], help="evaluate checkpoints at several frame intervals")
    w.add_argument("--intervals", default="1,2,3,5,10")
    sub.add_parser("grad-check", parents=[common], help="run the policy-gradient oracle suite")
    return p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_values(args) -> dict[str, str]:
    values = config_mod.read_config_file(args.config) if args.config else {}
    values.update(_overrides(args.overrides))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.interval is not None:
        values["interval"] = str(args.interval)
    return values


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def build_configs(command: str, values: dict[str, str]) -> dict:
    """Typed configuration objects for ``command``; unknown keys raise a
    :class:`ConfigError` naming the key."""
    extra = _EXTRA_KEYS.get(command, {})
    if command == "synth-gen":
        classes = {"scene": SyntheticSceneConfig}
    else:
        classes = {"train": TrainConfig, "protocol": EvalProtocol}
    known = set(extra)
    for cls in classes.values():
        known |= _field_names(cls)
    for key in values:
        if key not in known:
            raise ConfigError(key, f"unknown configuration key for {command}")
    out = {}
    for name, cls in classes.items():
        mine = {k: v for k, v in values.items() if k in _field_names(cls)}
        try:
            out[name] = config_mod.build(cls, mine)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(name, str(e)) from None
    for key, (typ, default) in extra.items():
        out[key] = config_mod._coerce(key, typ, values[key]) if key in values else default
    return out


def _snapshot(configs: dict) -> dict:
    snap = {}
    for v in configs.values():
        if dataclasses.is_dataclass(v):
            for f in dataclasses.fields(v):
                val = getattr(v, f.name)
                snap[f.name] = list(val) if isinstance(val, tuple) else val
    for k, v in configs.items():
        if not dataclasses.is_dataclass(v):
            snap[k] = v
    return snap


def _out_dir(args, manifest: RunManifest) -> Path:
    manifest.assign_id()
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get("SLT_OUT_ROOT", DEFAULT_OUT_ROOT))
    return root / f"{args.command}-{manifest.assign_id()}"


def _require(value, flag: str, command: str):
    if not value:
        raise UsageError(f"{command} requires {flag}")
    return value


def _one_checkpoint(args, required: bool = True):
    ck = args.checkpoint or []
    if len(ck) > 1:
        raise UsageError(f"{args.command} takes a single --checkpoint")
    if required and not ck:
        raise UsageError(f"{args.command} requires --checkpoint")
    return ck[0] if ck else None


def _dataset(manifest: RunManifest, path):
    videos = load_dataset(path)
    if not videos:
        raise DatasetError(f"dataset {path} contains no sequences")
    manifest.add_dataset(path, dataset_fingerprint(path))
    return videos


def _print_report(report) -> None:
    for k, v in report.summary().items():
        print(f"{k}: {v:.4f}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args, configs) -> int:
    scene = configs["scene"]
    manifest = RunManifest("synth-gen", scene.seed, _snapshot(configs))
    out = _out_dir(args, manifest)
    videos = generate_synthetic_dataset(scene, configs["num_videos"], configs["prefix"])
    write_dataset(videos, out)
    manifest.add_dataset(out, dataset_fingerprint(out))
    manifest.write(out)
    print(f"wrote {len(videos)} videos to {out}")
    print(f"sha256 {manifest.datasets[-1]['sha256']}")
    return 0


def cmd_pretrain(args, configs) -> int:
    import torch

    from .engine import pretrain_frame_level
    from .tracker import SiameseTracker

    cfg: TrainConfig = configs["train"]
    manifest = RunManifest("pretrain", cfg.seed, _snapshot(configs))
    videos = _dataset(manifest, _require(args.dataset, "--dataset", "pretrain"))
    init = _one_checkpoint(args, required=False)
    torch.manual_seed(cfg.seed)
    if init:
        model, _ = load_checkpoint(init)
        manifest.add_checkpoint(init)
    else:
        model = SiameseTracker(cfg.tracker_config())
    out = _out_dir(args, manifest)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.dump(cfg))
    lineage = {"init": init} if init else {}
    hist = pretrain_frame_level(model, videos, cfg, out, lineage=lineage)
    manifest.outputs.append(str(out / "pretrain_final.ckpt"))
    manifest.write(out)
    for rec in hist.epochs:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
    print(f"checkpoint {out / 'pretrain_final.ckpt'}")
    return 0


def cmd_slt(args, configs) -> int:
    import torch

    from .engine import train_slt
    from .tracker import SiameseTracker

    cfg: TrainConfig = configs["train"]
    manifest = RunManifest("slt", cfg.seed, _snapshot(configs))
    videos = _dataset(manifest, _require(args.dataset, "--dataset", "slt"))
    init = _one_checkpoint(args, required=False)
    torch.manual_seed(cfg.seed)
    if args.resume:
        model, header = load_checkpoint(args.resume)
        manifest.add_checkpoint(args.resume)
        lineage = header.get("meta", {}).get("lineage", {})
    elif init:
        model, _ = load_checkpoint(init)
        model = _with_postprocessing(model, cfg)
        manifest.add_checkpoint(init)
        lineage = {"pretrained": init, "sha256": manifest.lineage[-1]["sha256"]}
    elif args.from_scratch:
        model = SiameseTracker(cfg.tracker_config())
        lineage = {"pretrained": None}
    else:
        raise UsageError("slt requires --checkpoint (a pre-trained model), --resume or --from-scratch")
    out = _out_dir(args, manifest)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_mod.dump(cfg))
    stats = train_slt(model, videos, cfg, out, resume=args.resume, max_steps=args.max_steps, lineage=lineage)
    if args.eval_dataset:
        test = _dataset(manifest, args.eval_dataset)
        res = run_ope(model, test, configs["protocol"])
        write_ope(res, out / "eval")
        _print_report(res.report)
    manifest.outputs.extend(str(p) for p in sorted(out.glob("slt_step*.ckpt")))
    manifest.write(out)
    if stats:
        last = stats[-1]
        print(f"steps {len(stats)} last loss {last.loss:.4f} r_sample {last.mean_r_sample:.4f} r_greedy {last.mean_r_greedy:.4f}")
    print(f"run directory {out}")
    return 0


def _with_postprocessing(model, cfg: TrainConfig):
    """Apply the configured action-distribution style and penalty weight to a
    loaded model (they are not learned, so they may differ per stage)."""
    from .tracker import SiameseTracker

    tcfg = cfg.tracker_config(model.cfg)
    if tcfg == model.cfg:
        return model
    fresh = SiameseTracker(tcfg)
    fresh.load_state_dict(model.state_dict())
    return fresh


def cmd_eval(args, configs) -> int:
    protocol: EvalProtocol = configs["protocol"]
    cfg: TrainConfig = configs["train"]
    manifest = RunManifest("eval", cfg.seed, _snapshot(configs))
    ck = _one_checkpoint(args)
    model, _ = load_checkpoint(ck)
    manifest.add_checkpoint(ck)
    videos = _dataset(manifest, _require(args.dataset, "--dataset", "eval"))
    out = _out_dir(args, manifest)
    res = run_ope(model, videos, protocol)
    write_ope(res, out)
    plot_success({Path(ck).stem: success_curves(res)}, out / "success.png", f"interval {protocol.interval}")
    manifest.outputs.extend([str(out / "report.json"), str(out / "report.csv")])
    manifest.write(out)
    _print_report(res.report)
    if res.skipped:
        print(f"skipped {len(res.skipped)} sequence(s): {', '.join(res.skipped)}")
    return 0


def cmd_ablate(args, configs) -> int:
    cfg: TrainConfig = configs["train"]
    manifest = RunManifest("ablate", cfg.seed, _snapshot(configs))
    ck = _one_checkpoint(args)
    manifest.add_checkpoint(ck)
    train = _dataset(manifest, _require(args.dataset, "--dataset", "ablate"))
    test = _dataset(manifest, args.eval_dataset)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
    out = _out_dir(args, manifest)
    rows = ablation_suite(train, test, cfg, ck, out, variants, configs["protocol"], args.max_steps)
    manifest.outputs.append(str(out / "ablation.csv"))
    manifest.write(out)
    print(f"{'variant':<12} {'AO':>8} {'delta':>8}")
    for r in rows:
        print(f"{r.variant:<12} {r.ao:8.4f} {r.delta:+8.4f}")
    return 0


def cmd_sweep(args, configs) -> int:
    cfg: TrainConfig = configs["train"]
    manifest = RunManifest("sweep", cfg.seed, _snapshot(configs))
    cks = args.checkpoint or []
    if not cks:
        raise UsageError("sweep requires at least one --checkpoint")
    models = {}
    for ck in cks:
        name = Path(ck).stem
        if name in models:
            name = f"{name}_{len(models)}"
        models[name], _ = load_checkpoint(ck)
        manifest.add_checkpoint(ck)
    videos = _dataset(manifest, _require(args.dataset, "--dataset", "sweep"))
    try:
        intervals = [int(x) for x in args.intervals.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("intervals", f"expected comma-separated integers, got {args.intervals!r}") from None
    out = _out_dir(args, manifest)
    rows = frame_rate_sweep(models, videos, intervals, configs["protocol"])
    write_sweep(rows, out)
    manifest.outputs.append(str(out / "sweep.csv"))
    manifest.write(out)
    for r in rows:
        print(f"{r.model} i={r.interval} AO={r.ao:.4f} AUC={r.success_auc:.4f}")
    return 0


def cmd_grad_check(args, configs) -> int:
    from .oracle import run_oracle_suite

    seed = configs["train"].seed
    manifest = RunManifest("grad-check", seed, _snapshot(configs))
    results = run_oracle_suite(seed, configs["N"], configs["T"], configs["num_samples"])
    out = _out_dir(args, manifest)
    out.mkdir(parents=True, exist_ok=True)
    text = "\n".join(r.line() for r in results) + "\n"
    (out / "grad_check.txt").write_text(text)
    manifest.outputs.append(str(out / "grad_check.txt"))
    manifest.write(out)
    print(text, end="")
    return 0 if all(r.passed for r in results) else 1


HANDLERS = {
    "synth-gen": cmd_synth_gen,
    "pretrain": cmd_pretrain,
    "slt": cmd_slt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        configs = build_configs(args.command, resolve_values(args))
        return HANDLERS[args.command](args, configs)
    except ConfigError as e:
        print(f"slt {args.command}: invalid configuration: {e}", file=sys.stderr)
        return 2
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"slt {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, SamplingError, CheckpointError, FileNotFoundError) as e:
        print(f"slt {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
