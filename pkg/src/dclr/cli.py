"""Command-line entry point: ``dclr <command> [options]``."""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments
from .config import Config, ConfigError, load_config
from .errors import DataError, IntegrityError, TrainingDiverged
from .evaluation import (
    activation_maps_for,
    bias_audit,
    dataset_features,
    linear_probe,
    retrieval_report,
    save_activation_heatmaps,
    write_report,
)
from .synthvideo import SynthDataset, build_dataset, sample_two_views
from .trainer import Trainer, encoder_from_checkpoint

log = logging.getLogger("dclr")


def code_version() -> str:
    """Content hash of the package sources (stands in for a commit id)."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    def __init__(self, command: str, cfg: Config, out_dir: Path, argv=None):
        self.out_dir = out_dir
        self.doc = {
            "command": command,
            "argv": list(argv or []),
            "config": cfg.to_dict(),
            "config_hash": cfg.hash(),
            "seed": cfg.train.seed,
            "data_seed": cfg.data.seed,
            "code_version": code_version(),
            "started": _now(),
            "finished": None,
            "outputs": [],
        }

    def add(self, path: Path) -> Path:
        self.doc["outputs"].append(str(Path(path).relative_to(self.out_dir)))
        return path

    def write(self) -> Path:
        self.doc["finished"] = _now()
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.doc, indent=2, sort_keys=True) + "\n")
        return path


# ---------------------------------------------------------------------------

def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected section.field=value")
        out[key.strip()] = value
    return out


def _config(args) -> Config:
    overrides = _parse_sets(args.set)
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    return load_config(args.config, overrides)


def _dataset(args, cfg: Config) -> SynthDataset:
    if getattr(args, "data", None):
        ds = SynthDataset.load(args.data, args.split)
        log.info("loaded %d videos from %s", len(ds), args.data)
        return ds
    return build_dataset(cfg.data)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_context(args):
    """Encoder from a checkpoint, with the eval section taken from the command line."""
    encoder, ckpt_cfg, manifest = encoder_from_checkpoint(args.checkpoint)
    cli_cfg = _config(args)
    ckpt_cfg.eval = cli_cfg.eval
    if not getattr(args, "data", None):
        ckpt_cfg.data = cli_cfg.data
    return encoder, ckpt_cfg, manifest


def _provenance(cfg: Config, manifest: dict | None = None) -> dict:
    out = {"config_hash": cfg.hash(), "seed": cfg.train.seed, "data_seed": cfg.data.seed}
    if manifest is not None:
        out["checkpoint_config_hash"] = manifest["config_hash"]
        out["checkpoint_epoch"] = manifest["epoch"]
    return out


# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    run = RunManifest("generate-data", cfg, out, sys.argv[1:])
    ds = build_dataset(cfg.data)
    for p in ds.save(out, args.split):
        run.add(p)
    run.write()


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    out = _out_dir(args)
    run = RunManifest("pretrain", cfg, out, sys.argv[1:])
    ds = _dataset(args, cfg)
    trainer = Trainer(cfg, ds)
    if args.resume:
        trainer.resume(args.resume)
    metrics_path = out / "metrics.jsonl"
    try:
        with open(metrics_path, "w") as fh:
            trainer.fit(out / "checkpoints", fh)
    finally:
        run.add(metrics_path)
        for p in sorted((out / "checkpoints").glob("*.pt")):
            run.add(p)
        run.write()
    if trainer.state.history:
        run.add(experiments.plot_loss_curves(out / "loss_curves.png", trainer.state.history))
        run.write()


def cmd_probe(args) -> None:
    encoder, cfg, manifest = _eval_context(args)
    out = _out_dir(args)
    run = RunManifest("probe", cfg, out, sys.argv[1:])
    ds = _dataset(args, cfg)
    feats = dataset_features(encoder, ds, cfg.eval, cfg.train.clip_len, cfg.augment.crop_size)
    labels = {"scene": ds.scene_ids, "motion": ds.motion_ids, "action": ds.action_ids}[args.target]
    res = linear_probe(feats, labels, cfg.eval.split_seed, args.target, cfg.eval.test_fraction,
                       cfg.eval.num_eval_clips, strata=ds.action_ids)
    run.add(write_report(out / f"probe_{args.target}.json", {"probe": res, **_provenance(cfg, manifest)}))
    run.write()
    print(f"{args.target} probe top-1: {res.top1_accuracy:.4f}")


def cmd_retrieve(args) -> None:
    encoder, cfg, manifest = _eval_context(args)
    out = _out_dir(args)
    run = RunManifest("retrieve", cfg, out, sys.argv[1:])
    ds = _dataset(args, cfg)
    feats = dataset_features(encoder, ds, cfg.eval, cfg.train.clip_len, cfg.augment.crop_size)
    labels = {"scene": ds.scene_ids, "motion": ds.motion_ids, "action": ds.action_ids}[args.target]
    res = retrieval_report(feats, labels, cfg.eval, strata=ds.action_ids)
    run.add(write_report(out / f"retrieval_{args.target}.json",
                         {"target": args.target, "retrieval": res, **_provenance(cfg, manifest)}))
    run.write()
    print(" ".join(f"R@{k}={v:.4f}" for k, v in res.recalls.items()))


def cmd_bias_audit(args) -> None:
    encoder, cfg, manifest = _eval_context(args)
    out = _out_dir(args)
    run = RunManifest("bias-audit", cfg, out, sys.argv[1:])
    ds = _dataset(args, cfg)
    res = bias_audit(encoder, ds, cfg.eval, cfg.train.clip_len, cfg.augment.crop_size)
    run.add(write_report(out / "bias_audit.json", {**res, **_provenance(cfg, manifest)}))
    run.write()
    print(f"scene {res['scene_probe'].top1_accuracy:.4f} motion {res['motion_probe'].top1_accuracy:.4f}")


def cmd_ablate(args) -> None:
    base = _config(args)
    if args.desk:
        from .config import apply_overrides

        apply_overrides(base, {k: v for k, v in experiments.DESK.items() if k != "train.epochs"})
    out = _out_dir(args)
    names = args.grid or ["vv_only", "vs_only", "vd_only", "dual"]
    seeds = args.seeds or [base.train.seed]
    ds = _dataset(args, base)
    results = []
    for name in names:
        for seed in seeds:
            cfg = experiments.grid_config(base, name, seed)
            point = out / f"{name}_seed{seed}"
            point.mkdir(parents=True, exist_ok=True)
            run = RunManifest("ablate", cfg, point, sys.argv[1:])
            with open(point / "metrics.jsonl", "w") as fh:
                res, trainer = experiments.run_point(cfg, ds, name, None, fh)
            run.add(point / "metrics.jsonl")
            report = {"name": name, "scene_probe": res.scene_probe, "motion_probe": res.motion_probe,
                      **_provenance(cfg)}
            run.add(write_report(point / "bias_audit.json", report))
            run.write()
            results.append(res)
            print(f"{name} seed {seed}: scene {res.scene_probe:.4f} motion {res.motion_probe:.4f}", flush=True)
    summary = experiments.summarize(results)
    top = RunManifest("ablate", base, out, sys.argv[1:])
    top.add(experiments.write_table(out / "ablation.csv", results))
    top.add(write_report(out / "summary.json", {"summary": summary, "grid": names, "seeds": list(seeds)}))
    top.add(experiments.plot_probe_bars(out / "probe_bars.png", summary))
    top.write()


def cmd_emit_activations(args) -> None:
    encoder, cfg, manifest = _eval_context(args)
    out = _out_dir(args)
    run = RunManifest("emit-activations", cfg, out, sys.argv[1:])
    ds = _dataset(args, cfg)
    ids = list(range(min(args.num_samples, len(ds))))
    for vid in ids:
        rng = np.random.default_rng([cfg.train.seed, vid])
        pair = sample_two_views(ds.clip(vid), cfg.train.clip_len, rng, cfg.augment, ds.mean, ds.std)
        view = pair.view_i
        maps = activation_maps_for(encoder, view.v[None], view.s[None], view.d[None])
        maps = tuple(m[0] for m in maps)
        title = f"video {vid} scene {ds.scene_ids[vid]} motion {ds.motion_ids[vid]}"
        run.add(save_activation_heatmaps(maps, view.v, out / f"activations_{vid:04d}.png", title))
    run.write()


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (sections: data, augment, encoder, train, eval)")
    common.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                        help="override one config field; repeatable; wins over the file and DCLR_* env vars")
    common.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory written by generate-data (default: generate in memory)")
    data.add_argument("--split", default="train")

    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True)

    p = argparse.ArgumentParser(prog="dclr", description="Decoupled contrastive video pretraining on synthetic clips.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="render the synthetic dataset to disk")
    g.add_argument("--split", default="train")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("pretrain", parents=[common, data], help="self-supervised pretraining")
    t.add_argument("--epochs", type=int, help="shortcut for --set train.epochs=N")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("probe", cmd_probe, "linear probe on frozen features"),
                                 ("retrieve", cmd_retrieve, "nearest-neighbour retrieval R@k")):
        s = sub.add_parser(name, parents=[common, data, ckpt], help=helptext)
        s.add_argument("--target", choices=["scene", "motion", "action"], default="motion")
        s.set_defaults(func=func)

    b = sub.add_parser("bias-audit", parents=[common, data, ckpt], help="scene and motion probes side by side")
    b.set_defaults(func=cmd_bias_audit)

    a = sub.add_parser("ablate", parents=[common, data], help="sweep loss-term combinations")
    a.add_argument("--grid", nargs="+", choices=sorted(experiments.GRID), help="grid points to run")
    a.add_argument("--seeds", nargs="+", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--desk", action="store_true", help="use the narrow desk-scale encoder")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("emit-activations", parents=[common, data, ckpt], help="A_v / A_s / A_d heatmaps")
    e.add_argument("--num-samples", type=int, default=4)
    e.set_defaults(func=cmd_emit_activations)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, IntegrityError, TrainingDiverged, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
