"""Loss-combination sweeps shared by the ``ablate`` command and the acceptance suite."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import Config, apply_overrides
from .evaluation import bias_audit
from .synthvideo import SynthDataset
from .trainer import Trainer

log = logging.getLogger(__name__)

# Plain objective: no activation alignment, no feature refinement, no queue.
PLAIN = {"train.lambda_ac": 0.0, "train.refine": False, "train.retrieval": "none"}


def _terms(vv=False, vs=False, vd=False, sd=False, **extra):
    out = {"train.use_vv": vv, "train.use_vs": vs, "train.use_vd": vd, "train.use_sd": sd}
    out.update(extra)
    return out


GRID: dict[str, dict] = {
    "vv_only": {**PLAIN, **_terms(vv=True)},
    "vs_only": {**PLAIN, **_terms(vs=True)},
    "vd_only": {**PLAIN, **_terms(vd=True)},
    "vs_vd": {**PLAIN, **_terms(vs=True, vd=True)},
    "dual": {**PLAIN, **_terms(vs=True, vd=True, sd=True)},
    "dual_same_view": {**PLAIN, **_terms(vs=True, vd=True, sd=True), "train.same_view": True},
    "dual_retrieval": {**PLAIN, **_terms(vs=True, vd=True, sd=True), "train.retrieval": "topk_prior",
                       "train.topk": 5},
    "vv_vs": {**PLAIN, **_terms(vv=True, vs=True)},
    "vv_vd": {**PLAIN, **_terms(vv=True, vd=True)},
    "vv_dual": {**PLAIN, **_terms(vv=True, vs=True, vd=True, sd=True)},
    "full": {},
}

# Desk-scale settings for the bias experiment: a narrower encoder keeps 18 runs
# of 30 epochs inside the runtime budget.
DESK = {"encoder.channel_widths": [8, 16, 32, 64], "train.epochs": 30}


@dataclass
class RunResult:
    name: str
    seed: int
    config_hash: str
    scene_probe: float
    motion_probe: float
    final_losses: dict

    def row(self) -> dict:
        return {"name": self.name, "seed": self.seed, "config_hash": self.config_hash,
                "scene_probe": self.scene_probe, "motion_probe": self.motion_probe,
                **{k: self.final_losses.get(k, float("nan")) for k in ("total", "l_vv", "l_vs", "l_vd", "l_sd")}}


def grid_config(base: Config, name: str, seed: int) -> Config:
    if name not in GRID:
        raise KeyError(f"unknown grid point {name!r}; choose from {sorted(GRID)}")
    cfg = copy.deepcopy(base)
    apply_overrides(cfg, GRID[name])
    apply_overrides(cfg, {"train.seed": seed})
    return cfg.validate()


def run_point(cfg: Config, dataset: SynthDataset, name: str = "", out_dir: str | Path | None = None,
              metrics=None) -> tuple[RunResult, Trainer]:
    tr = Trainer(cfg, dataset)
    tr.fit(out_dir, metrics)
    audit = bias_audit(tr.encoder, dataset, cfg.eval, cfg.train.clip_len, cfg.augment.crop_size)
    last = tr.state.history[-1] if tr.state.history else {}
    res = RunResult(name, cfg.train.seed, cfg.hash(), audit["scene_probe"].top1_accuracy,
                    audit["motion_probe"].top1_accuracy, {k: v for k, v in last.items() if k != "type"})
    log.info("%s seed %d: scene %.3f motion %.3f", name, cfg.train.seed, res.scene_probe, res.motion_probe)
    return res, tr


def sweep(base: Config, dataset: SynthDataset, names: Iterable[str], seeds: Sequence[int]) -> list[RunResult]:
    results = []
    for name in names:
        for seed in seeds:
            res, _ = run_point(grid_config(base, name, seed), dataset, name)
            results.append(res)
    return results


def summarize(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    """Mean and std of both probes per grid point."""
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r.name for r in results):
        rs = [r for r in results if r.name == name]
        scene = np.array([r.scene_probe for r in rs])
        motion = np.array([r.motion_probe for r in rs])
        out[name] = {"scene_mean": float(scene.mean()), "scene_std": float(scene.std()),
                     "motion_mean": float(motion.mean()), "motion_std": float(motion.std()), "runs": len(rs)}
    return out


def write_table(path: str | Path, results: Sequence[RunResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in results]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["name"])
        w.writeheader()
        w.writerows(rows)
    return path


def plot_probe_bars(path: str | Path, summary: dict[str, dict[str, float]]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(summary)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.5))
    for off, key, label in ((-0.2, "scene", "scene probe"), (0.2, "motion", "motion probe")):
        ax.bar(x + off, [summary[n][f"{key}_mean"] for n in names], 0.4,
               yerr=[summary[n][f"{key}_std"] for n in names], label=label)
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("top-1")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def plot_loss_curves(path: str | Path, history: Sequence[dict]) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [h["epoch"] for h in history]
    for k in ("total", "l_vv", "l_vs", "l_vd", "l_sd", "l_ac"):
        vals = [h[k] for h in history]
        if any(v != 0 for v in vals):
            ax.plot(epochs, vals, label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path
