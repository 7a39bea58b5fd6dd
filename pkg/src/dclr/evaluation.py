"""Frozen-feature evaluation: linear probes, nearest-neighbour retrieval and the scene-bias audit."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .config import EvalConfig
from .encoder import VideoEncoder, activation_map
from .errors import DataError
from .synthvideo import SynthDataset, VideoClip, eval_windows, prepare_eval_clip

log = logging.getLogger(__name__)


class SplitError(DataError):
    pass


@dataclass
class ProbeResult:
    target: str
    top1_accuracy: float
    num_classes: int
    num_eval_clips: int
    num_train: int
    num_test: int


@dataclass
class RetrievalResult:
    recalls: dict[int, float]


@torch.no_grad()
def extract_video_features(
    encoder: VideoEncoder,
    clips: Sequence[VideoClip] | SynthDataset,
    num_eval_clips: int,
    clip_len: int,
    crop_size: int,
    mean=(0.0, 0.0, 0.0),
    std=(1.0, 1.0, 1.0),
    batch_size: int = 64,
) -> np.ndarray:
    """Per-video average of pooled backbone features over uniformly spaced clips."""
    if isinstance(clips, SynthDataset):
        mean, std = clips.mean, clips.std
        clips = [clips.clip(i) for i in range(len(clips))]
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    windows, owner = [], []
    for v, clip in enumerate(clips):
        pixels = torch.from_numpy(np.ascontiguousarray(clip.pixels, dtype=np.float32))
        starts = eval_windows(pixels.shape[1], clip_len, num_eval_clips)
        if not starts:
            raise DataError(f"video {clip.video_id} has {pixels.shape[1]} frames, need {clip_len}")
        for s in starts:
            windows.append(prepare_eval_clip(pixels[:, s:s + clip_len], crop_size, mean, std))
            owner.append(v)
    feats = []
    for i in range(0, len(windows), batch_size):
        feats.append(encoder.pooled_features(torch.stack(windows[i:i + batch_size]).to(dtype)))
    encoder.train(was_training)
    per_clip = torch.cat(feats).double().numpy() if feats else np.zeros((0, encoder.feature_dim))
    owner = np.asarray(owner)
    out = np.zeros((len(clips), per_clip.shape[1]))
    for v in range(len(clips)):
        out[v] = per_clip[owner == v].mean(axis=0)
    return out


def stratified_split(labels: np.ndarray, seed: int, test_fraction: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1), len(idx) - 1)
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.asarray(train, dtype=int)), np.sort(np.asarray(test, dtype=int))


def linear_probe(features: np.ndarray, labels: np.ndarray, split_seed: int = 0, target: str = "",
                 test_fraction: float = 0.25, num_eval_clips: int = 1, strata=None) -> ProbeResult:
    """Multinomial logistic regression on standardized frozen features; top-1 on the held-out split.

    The split is stratified on ``strata`` when given (e.g. the joint scene/motion cell),
    otherwise on ``labels``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    train, test = stratified_split(labels if strata is None else strata, split_seed, test_fraction)
    train_classes, test_classes = set(labels[train]), set(labels[test])
    if len(train_classes) < 2 or len(test_classes) < 2:
        raise SplitError("need at least 2 classes in both the train and the test split")
    if not test_classes <= train_classes:
        raise SplitError(f"classes {sorted(test_classes - train_classes)} missing from the train split")
    scaler = StandardScaler().fit(features[train])
    clf = LogisticRegression(C=1.0, tol=1e-6, max_iter=5000)
    clf.fit(scaler.transform(features[train]), labels[train])
    acc = float(np.mean(clf.predict(scaler.transform(features[test])) == labels[test]))
    return ProbeResult(target, acc, len(train_classes), num_eval_clips, len(train), len(test))


def retrieval_recall(query_features, query_labels, gallery_features, gallery_labels,
                     ks: Sequence[int] = (1, 5, 10, 20)) -> RetrievalResult:
    """R@k: share of queries with a same-label item among their k cosine-nearest gallery items."""
    q = np.asarray(query_features, dtype=np.float64)
    g = np.asarray(gallery_features, dtype=np.float64)
    if len(g) == 0:
        raise DataError("gallery is empty")
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    order = np.argsort(-(q @ g.T), axis=1, kind="stable")
    match = np.asarray(gallery_labels)[order] == np.asarray(query_labels)[:, None]
    recalls = {}
    for k in ks:
        kk = k
        if k > len(g):
            log.warning("k=%d exceeds gallery size %d; clamping", k, len(g))
            kk = len(g)
        recalls[int(k)] = float(match[:, :kk].any(axis=1).mean())
    return RetrievalResult(recalls)


def dataset_features(encoder: VideoEncoder, dataset: SynthDataset, ecfg: EvalConfig, clip_len: int,
                     crop_size: int) -> np.ndarray:
    return extract_video_features(encoder, dataset, ecfg.num_eval_clips, clip_len, crop_size)


def bias_audit(encoder: VideoEncoder, dataset: SynthDataset, ecfg: EvalConfig | None = None, clip_len: int = 8,
               crop_size: int = 32, features: np.ndarray | None = None) -> dict[str, ProbeResult]:
    """Scene and motion probes on the same frozen features."""
    ecfg = ecfg or EvalConfig()
    if features is None:
        features = dataset_features(encoder, dataset, ecfg, clip_len, crop_size)
    # one split balanced over both factors, shared by the two probes
    kw = dict(split_seed=ecfg.split_seed, test_fraction=ecfg.test_fraction, num_eval_clips=ecfg.num_eval_clips,
              strata=dataset.action_ids)
    return {
        "scene_probe": linear_probe(features, dataset.scene_ids, target="scene", **kw),
        "motion_probe": linear_probe(features, dataset.motion_ids, target="motion", **kw),
    }


def retrieval_report(features: np.ndarray, labels: np.ndarray, ecfg: EvalConfig, strata=None) -> RetrievalResult:
    """Held-out videos query the training videos (same split as the probes)."""
    train, test = stratified_split(labels if strata is None else strata, ecfg.split_seed, ecfg.test_fraction)
    return retrieval_recall(features[test], labels[test], features[train], labels[train], ecfg.ks)


def write_report(path: str | Path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(x):
    if isinstance(x, (ProbeResult, RetrievalResult)):
        return _jsonable(asdict(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


@torch.no_grad()
def activation_maps_for(encoder: VideoEncoder, v: torch.Tensor, s: torch.Tensor, d: torch.Tensor):
    """(A_v, A_s, A_d) for one batch of decoupled inputs, eval mode."""
    was_training = encoder.training
    encoder.eval()
    out = tuple(activation_map(encoder.feature_map(x)) for x in (v, s, d))
    encoder.train(was_training)
    return out


def save_activation_heatmaps(maps, frames: torch.Tensor, path: str | Path, title: str = "") -> Path:
    """Grid image: rows = input frames, A_v, A_s, A_d; columns = feature time steps."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    a_v, a_s, a_d = (m.numpy() for m in maps)
    t_feat = a_v.shape[0]
    frame_idx = np.linspace(0, frames.shape[1] - 1, t_feat).round().astype(int)
    fig, axes = plt.subplots(4, t_feat, figsize=(2 * t_feat, 8), squeeze=False)
    img = frames.permute(1, 2, 3, 0).numpy()
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    for c in range(t_feat):
        axes[0, c].imshow(img[frame_idx[c]])
        for r, (name, a) in enumerate((("A_v", a_v), ("A_s", a_s), ("A_d", a_d)), start=1):
            axes[r, c].imshow(a[c], cmap="jet")
            axes[r, c].set_title(f"{name} t={c}", fontsize=8)
    for ax in axes.flat:
        ax.axis("off")
    fig.suptitle(title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path
