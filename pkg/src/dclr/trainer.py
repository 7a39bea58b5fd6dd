"""Pretraining loop for the dual contrastive objective."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np
import torch

from .config import Config, TrainConfig
from .encoder import VideoEncoder, activation_map, weighted_pool
from .errors import BatchSizeError, IntegrityError, TrainingDiverged
from .losses import (
    LossReport,
    batch_loss_vd_retrieved,
    cross_view_pairing,
    loss_ac,
    loss_sd,
    pairwise_nt_xent,
    same_view_pairing,
    similarity_stats,
    total_objective,
)
from .memory import MotionQueue, SlowExtractor, snapshot_extractor
from .synthvideo import SynthDataset, sample_two_views

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dclr-checkpoint"
CHECKPOINT_VERSION = 1


def schedule_flags(epoch: int, cfg: TrainConfig) -> tuple[bool, bool]:
    """(use_retrieval, use_refined): both switch on once warmup is over."""
    on = epoch >= cfg.effective_warmup
    return on, on


@dataclass
class Batch:
    video_ids: torch.Tensor
    v: torch.Tensor  # [2N, C, T, H, W]: view i of every video, then view j
    s: torch.Tensor
    d: torch.Tensor
    batch_id: str = ""

    @property
    def n(self) -> int:
        return len(self.video_ids)


def collate(pairs) -> Batch:
    first = [p.view_i for p in pairs]
    second = [p.view_j for p in pairs]
    stack = lambda attr: torch.stack([getattr(t, attr) for t in first + second])  # noqa: E731
    return Batch(torch.tensor([p.video_id for p in pairs]), stack("v"), stack("s"), stack("d"))


@dataclass
class TrainState:
    encoder: VideoEncoder
    optimizer: torch.optim.Optimizer
    queue: MotionQueue | None = None
    static_queue: MotionQueue | None = None
    slow: SlowExtractor | None = None
    epoch: int = -1  # last completed epoch
    step: int = 0
    history: list[dict] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: Config, dataset: SynthDataset | None = None, encoder: VideoEncoder | None = None,
                 dtype: torch.dtype = torch.float32):
        self.cfg = cfg.validate()
        self.tc = cfg.train
        self.dataset = dataset
        self.dtype = dtype
        torch.manual_seed(self.tc.seed)
        if encoder is None:
            encoder = VideoEncoder(cfg.encoder)
        encoder = encoder.to(dtype)
        optimizer = torch.optim.SGD(encoder.parameters(), lr=self.tc.learning_rate, momentum=self.tc.momentum,
                                    weight_decay=self.tc.weight_decay)
        self.state = TrainState(encoder, optimizer)
        if self.tc.retrieval != "none":
            self.state.queue = MotionQueue(self.tc.queue_size, cfg.encoder.embed_dim, dtype)
        if self.tc.static_retrieval:
            self.state.static_queue = MotionQueue(self.tc.queue_size, cfg.encoder.embed_dim, dtype)

    @property
    def encoder(self) -> VideoEncoder:
        return self.state.encoder

    @property
    def uses_memory(self) -> bool:
        return self.state.queue is not None or self.state.static_queue is not None

    # -- data ---------------------------------------------------------------

    def make_batch(self, video_ids: Iterable[int], epoch: int) -> Batch:
        ds = self.dataset
        pairs = []
        for vid in video_ids:
            rng = np.random.default_rng([self.tc.seed, epoch, int(vid)])
            pairs.append(sample_two_views(ds.clip(int(vid)), self.tc.clip_len, rng, self.cfg.augment, ds.mean, ds.std))
        batch = collate(pairs)
        batch.v, batch.s, batch.d = batch.v.to(self.dtype), batch.s.to(self.dtype), batch.d.to(self.dtype)
        return batch

    def epoch_batches(self, epoch: int) -> list[np.ndarray]:
        order = np.random.default_rng([self.tc.seed, epoch, 7]).permutation(len(self.dataset))
        n = self.tc.batch_size
        chunks = [order[i:i + n] for i in range(0, len(order), n)]
        return [c for c in chunks if len(c) >= 2]

    # -- objective ----------------------------------------------------------

    def compute_losses(self, batch: Batch, use_retrieval: bool, use_refined: bool,
                       fixed_maps: tuple[torch.Tensor, torch.Tensor] | None = None) -> tuple[LossReport, dict]:
        """Forward all needed streams through the shared encoder and assemble the objective.

        A_s and A_d only ever enter as constants. ``fixed_maps`` substitutes given values
        for them, which lets a finite-difference check hold them still.
        """
        tc = self.tc
        n = batch.n
        if n < 2:
            raise BatchSizeError("need at least 2 videos per batch")
        use_retrieval = use_retrieval and tc.retrieval != "none"
        use_static_retrieval = use_retrieval and tc.static_retrieval
        use_refined = use_refined and tc.refine
        need_maps = tc.lambda_ac > 0 or use_refined
        need_s = tc.use_vs or tc.use_sd or need_maps
        need_d = tc.use_vd or tc.use_sd or need_maps

        # one pass per stream so batch norm sees each input distribution on its own
        F_v, f_v = self.encoder(batch.v)
        F_s = f_s = F_d = f_d = None
        if need_s:
            F_s, f_s = self.encoder(batch.s)
        if need_d:
            F_d, f_d = self.encoder(batch.d)
        emb = f_v

        zero = emb.new_zeros(())
        l_vv = l_vs = l_vd = l_sd = l_ac = zero
        f_sv = f_dv = f_v
        if need_maps:
            a_v = activation_map(F_v)
            a_s, a_d = fixed_maps if fixed_maps is not None else (activation_map(F_s), activation_map(F_d))
            if tc.lambda_ac > 0:
                l_ac = loss_ac(a_v, a_s, a_d)
            if use_refined:
                f_sv = self.encoder.project(weighted_pool(F_v, a_s.detach()))
                f_dv = self.encoder.project(weighted_pool(F_v, a_d.detach()))

        pairing = same_view_pairing(n) if tc.same_view else cross_view_pairing(n)
        extras: dict = {}
        if tc.use_vv:
            l_vv = pairwise_nt_xent(f_v, f_v, cross_view_pairing(n), tc.temperature)
        if tc.use_vs:
            if use_static_retrieval:
                hits = self._retrieve(self.state.static_queue, batch.s[:n], batch.video_ids)
                l_vs = batch_loss_vd_retrieved(f_sv, f_s, hits, tc.retrieval, tc.temperature, batch.video_ids)
            else:
                l_vs = pairwise_nt_xent(f_sv, f_s, pairing, tc.temperature)
        if tc.use_vd:
            if use_retrieval:
                hits = self._retrieve(self.state.queue, batch.d[:n], batch.video_ids)
                extras["retrieval_hits"] = float(np.mean([len(h) for h in hits]))
                l_vd = batch_loss_vd_retrieved(f_dv, f_d, hits, tc.retrieval, tc.temperature, batch.video_ids)
            else:
                l_vd = pairwise_nt_xent(f_dv, f_d, pairing, tc.temperature)
        if tc.use_sd:
            l_sd = loss_sd(f_s, f_d, tc.temperature)

        diag = {}
        if need_d:
            diag["sim_vd_pos"], diag["sim_vd_neg"] = similarity_stats(f_v, f_d, cross_view_pairing(n))
        if need_s:
            diag["sim_vs_pos"], diag["sim_vs_neg"] = similarity_stats(f_v, f_s, cross_view_pairing(n))
        diag.update(extras)
        report = total_objective(l_vs, l_vd, l_sd, l_ac, tc.lambda_ac, use_refined, use_retrieval, l_vv=l_vv,
                                 diagnostics=diag)
        return report, {"f_v": f_v, "maps": (a_s.detach(), a_d.detach()) if need_maps else None}

    def _retrieve(self, queue: MotionQueue, inputs: torch.Tensor, video_ids: torch.Tensor):
        k = 1 if self.tc.retrieval == "top1" else self.tc.topk
        if queue is None or len(queue) == 0:
            return [[] for _ in range(len(video_ids))]
        return queue.search_topk_batch(self.state.slow(inputs), k, video_ids)

    @torch.no_grad()
    def _update_queues(self, batch: Batch, f_v: torch.Tensor) -> None:
        n = batch.n
        values = f_v[n:].detach()
        if self.state.queue is not None:
            self.state.queue.enqueue(self.state.slow(batch.d[n:]), values, batch.video_ids)
        if self.state.static_queue is not None:
            self.state.static_queue.enqueue(self.state.slow(batch.s[n:]), values, batch.video_ids)

    # -- optimization -------------------------------------------------------

    def _set_lr(self, epoch: int) -> None:
        lr = self.tc.learning_rate
        if self.tc.lr_schedule == "cosine" and self.tc.epochs > 0:
            lr = 0.5 * lr * (1 + math.cos(math.pi * epoch / self.tc.epochs))
        for g in self.state.optimizer.param_groups:
            g["lr"] = lr

    def begin_epoch(self, epoch: int) -> None:
        self._set_lr(epoch)
        if self.uses_memory and (self.state.slow is None or epoch % self.tc.extractor_update_interval == 0):
            self.state.slow = snapshot_extractor(self.encoder, epoch)

    def train_step(self, batch: Batch, epoch: int) -> LossReport:
        if self.uses_memory and self.state.slow is None:
            self.state.slow = snapshot_extractor(self.encoder, epoch)
        self.encoder.train()
        use_retrieval, use_refined = schedule_flags(epoch, self.tc)
        report, cache = self.compute_losses(batch, use_retrieval, use_refined)
        if not torch.isfinite(report.total):
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch}, batch {batch.batch_id!r} (videos {batch.video_ids.tolist()}): "
                f"{json.dumps(report.to_dict())}"
            )
        opt = self.state.optimizer
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        opt.step()
        if self.uses_memory:
            self._update_queues(batch, cache["f_v"])
        self.state.step += 1
        return report

    def train_epoch(self, epoch: int, metrics: IO[str] | None = None) -> dict:
        self.begin_epoch(epoch)
        totals = []
        for b, ids in enumerate(self.epoch_batches(epoch)):
            batch = self.make_batch(ids, epoch)
            batch.batch_id = f"{epoch}:{b}"
            try:
                report = self.train_step(batch, epoch)
            except TrainingDiverged:
                if metrics is not None:
                    metrics.write(json.dumps({"type": "diverged", "epoch": epoch, "batch": b,
                                              "video_ids": batch.video_ids.tolist()}) + "\n")
                raise
            row = {"type": "step", "epoch": epoch, "step": self.state.step, "batch": b, **report.to_dict()}
            if metrics is not None:
                metrics.write(json.dumps(row) + "\n")
            totals.append(row)
        self.state.epoch = epoch
        summary = {"type": "epoch", "epoch": epoch, "steps": len(totals)}
        for k in ("total", "l_vv", "l_vs", "l_vd", "l_sd", "l_ac"):
            summary[k] = float(np.mean([r[k] for r in totals])) if totals else float("nan")
        if metrics is not None:
            metrics.write(json.dumps(summary) + "\n")
        self.state.history.append(summary)
        return summary

    def fit(self, out_dir: str | Path | None = None, metrics: IO[str] | None = None) -> TrainState:
        """Train from ``state.epoch + 1`` to ``cfg.train.epochs``, checkpointing into ``out_dir``."""
        start = self.state.epoch + 1
        for epoch in range(start, self.tc.epochs):
            summary = self.train_epoch(epoch, metrics)
            log.info("epoch %d: %s", epoch, summary)
            if out_dir is not None and ((epoch + 1) % self.tc.checkpoint_every == 0 or epoch == self.tc.epochs - 1):
                self.save_checkpoint(Path(out_dir) / f"epoch_{epoch:04d}.pt")
        if out_dir is not None:
            self.save_checkpoint(Path(out_dir) / "last.pt")
        return self.state

    # -- checkpoints --------------------------------------------------------

    def checkpoint_manifest(self) -> dict:
        st = self.state
        return {
            "epoch": st.epoch,
            "step": st.step,
            "encoder": st.encoder.state_dict(),
            "optimizer": st.optimizer.state_dict(),
            "queue": st.queue.state_dict() if st.queue is not None else None,
            "static_queue": st.static_queue.state_dict() if st.static_queue is not None else None,
            "slow": None if st.slow is None else {"state": st.slow.encoder.state_dict(), "epoch": st.slow.snapshot_epoch},
            "torch_rng": torch.get_rng_state(),
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "history": st.history,
        }

    def save_checkpoint(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.checkpoint_manifest())

    def load_state(self, manifest: dict) -> None:
        if manifest["config_hash"] != self.cfg.hash():
            raise IntegrityError(f"checkpoint config hash {manifest['config_hash']} != {self.cfg.hash()}")
        st = self.state
        st.encoder.load_state_dict(manifest["encoder"])
        st.optimizer.load_state_dict(manifest["optimizer"])
        if manifest["queue"] is not None:
            st.queue = MotionQueue.from_state_dict(manifest["queue"])
        if manifest["static_queue"] is not None:
            st.static_queue = MotionQueue.from_state_dict(manifest["static_queue"])
        if manifest["slow"] is not None:
            st.slow = snapshot_extractor(st.encoder, manifest["slow"]["epoch"])
            st.slow.encoder.load_state_dict(manifest["slow"]["state"])
        torch.set_rng_state(manifest["torch_rng"])
        st.epoch = manifest["epoch"]
        st.step = manifest["step"]
        st.history = list(manifest.get("history", []))

    def resume(self, path: str | Path) -> None:
        self.load_state(load_checkpoint(path))


def save_checkpoint(path: str | Path, manifest: dict) -> Path:
    """Write ``manifest`` wrapped with a format tag, version and sha256 of the payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(manifest, buf)
    payload = buf.getvalue()
    wrapper = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "sha256": hashlib.sha256(payload).hexdigest(), "payload": payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(wrapper, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_config_hash: str | None = None) -> dict:
    try:
        wrapper = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # truncated or foreign file
        raise IntegrityError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(wrapper, dict) or wrapper.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path} is not a checkpoint")
    if wrapper.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError(f"checkpoint version {wrapper.get('version')} unsupported (want {CHECKPOINT_VERSION})")
    payload = wrapper["payload"]
    if hashlib.sha256(payload).hexdigest() != wrapper["sha256"]:
        raise IntegrityError(f"checksum mismatch in {path}")
    manifest = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)
    if expected_config_hash is not None and manifest["config_hash"] != expected_config_hash:
        raise IntegrityError(f"checkpoint config hash {manifest['config_hash']} != expected {expected_config_hash}")
    return manifest


def encoder_from_checkpoint(path: str | Path) -> tuple[VideoEncoder, Config, dict]:
    from .config import config_from_dict

    manifest = load_checkpoint(path)
    cfg = config_from_dict(manifest["config"])
    enc = VideoEncoder(cfg.encoder)
    enc.load_state_dict(manifest["encoder"])
    enc.eval()
    return enc, cfg, manifest

