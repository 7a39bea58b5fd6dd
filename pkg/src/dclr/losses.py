"""Contrastive losses: NT-Xent building blocks, the dual terms, the same-view
regularizer, retrieval-corrected motion term and activation alignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .config import ConfigError
from .encoder import minmax_normalize
from .errors import BatchSizeError, ShapeError
from .memory import QueueHit as Retrieved
from .memory import prior_weights

log = logging.getLogger(__name__)

RETRIEVAL_LOSS_MODES = ("top1", "topk_prior", "topk_uniform")


def _unit(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise FloatingPointError("cosine similarity of a zero-norm vector is undefined")
    return z / norms


def cosine_similarity(z_i: torch.Tensor, z_j: torch.Tensor) -> torch.Tensor:
    return (_unit(z_i) * _unit(z_j)).sum(-1)


def info_nce(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
    negative_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean over anchors of -log softmax of the positive among {positive} + negatives.

    ``negatives`` is either per-anchor ``[Na, M, D]`` or a shared candidate set ``[M, D]``
    combined with a boolean ``negative_mask`` ``[Na, M]`` (True = use as negative).
    """
    if tau <= 0:
        raise ConfigError("temperature", "must be > 0")
    a = _unit(anchors)
    pos = (a * _unit(positives)).sum(-1) / tau
    if negatives.ndim == 2:
        neg = a @ _unit(negatives).T / tau
    elif negatives.ndim == 3:
        neg = torch.einsum("nd,nmd->nm", a, _unit(negatives)) / tau
    else:
        raise ShapeError(f"negatives must be [M, D] or [Na, M, D], got {tuple(negatives.shape)}")
    if negative_mask is not None:
        if negative_mask.shape != neg.shape:
            raise ShapeError(f"mask {tuple(negative_mask.shape)} does not match {tuple(neg.shape)}")
        if not bool(negative_mask.any(dim=1).all()):
            raise BatchSizeError("every anchor needs at least one negative")
        neg = neg.masked_fill(~negative_mask, float("-inf"))
    elif neg.shape[1] == 0:
        raise BatchSizeError("every anchor needs at least one negative")
    logits = torch.cat([pos[:, None], neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - pos).mean()


def cross_view_pairing(n: int) -> torch.Tensor:
    """Rows are laid out [view i of videos 0..n-1, view j of videos 0..n-1]."""
    return torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])


def same_view_pairing(n: int) -> torch.Tensor:
    return torch.arange(2 * n)


def _video_ids(rows: int, video_ids: torch.Tensor | None) -> torch.Tensor:
    if video_ids is None:
        if rows % 2:
            raise ShapeError("expected an even number of rows (two views per video)")
        return torch.arange(rows) % (rows // 2)
    return torch.as_tensor(video_ids)


def pairwise_nt_xent(
    emb_a: torch.Tensor,
    emb_b: torch.Tensor,
    pairing: torch.Tensor,
    tau: float,
    video_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """Symmetric NT-Xent between two embedding sets of the same 2N clips.

    Row k of ``emb_a`` is the anchor, row ``pairing[k]`` of ``emb_b`` its positive and
    every ``emb_b`` row of a different video a negative. Returns the per-video sum of
    both directional terms, averaged over videos.
    """
    if emb_a.shape != emb_b.shape:
        raise ShapeError(f"embedding sets differ: {tuple(emb_a.shape)} vs {tuple(emb_b.shape)}")
    vids = _video_ids(emb_a.shape[0], video_ids)
    n_videos = int(torch.unique(vids).numel())
    if n_videos < 2:
        raise BatchSizeError("need at least 2 videos per batch")
    if tau <= 0:
        raise ConfigError("temperature", "must be > 0")
    pairing = torch.as_tensor(pairing)
    sims = _unit(emb_a) @ _unit(emb_b).T / tau
    rows = torch.arange(len(sims))
    pos = sims[rows, pairing]
    keep = vids[:, None] != vids[None, :]
    keep[rows, pairing] = True
    logits = sims.masked_fill(~keep, float("-inf"))
    return (torch.logsumexp(logits, dim=1) - pos).sum() / n_videos


def loss_sd(emb_s: torch.Tensor, emb_d: torch.Tensor, tau: float, video_ids: torch.Tensor | None = None) -> torch.Tensor:
    """Same-view static/difference term. The objective subtracts it."""
    return pairwise_nt_xent(emb_s, emb_d, same_view_pairing(emb_s.shape[0] // 2), tau, video_ids)


def retrieval_weights(similarities: Sequence[float], mode: str) -> torch.Tensor:
    if mode == "top1":
        w = torch.zeros(len(similarities), dtype=torch.float64)
        w[0] = 1.0
        return w
    if mode == "topk_uniform":
        return torch.full((len(similarities),), 1.0 / len(similarities), dtype=torch.float64)
    if mode == "topk_prior":
        return torch.as_tensor(prior_weights(list(similarities)), dtype=torch.float64)
    raise ConfigError("retrieval", f"unknown mode {mode!r}")


def loss_vd_retrieved(
    f_v: torch.Tensor,
    f_d: torch.Tensor,
    retrieved: Sequence[Retrieved],
    mode: str,
    tau: float,
    negatives: torch.Tensor,
    negative_ids: torch.Tensor | None = None,
    fallback: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-video corrected motion term for one query clip.

    Each retrieved entry contributes I(f_v; key) + I(value; f_d), weighted according
    to ``mode``. Retrieved tensors are treated as constants. ``negatives`` are the
    difference embeddings of other videos in the batch; ``negative_ids`` lets entries
    sharing a retrieved video's id be dropped from that entry's candidate set.
    """
    if not retrieved:
        if fallback is None:
            raise ValueError("empty retrieval and no fallback loss given")
        log.info("empty retrieval result; using the plain motion term")
        return fallback
    if mode == "top1":
        retrieved = retrieved[:1]
    weights = retrieval_weights([r.similarity for r in retrieved], mode).to(f_v.dtype)
    keys = torch.stack([r.key for r in retrieved]).detach()
    values = torch.stack([r.value for r in retrieved]).detach()
    K = len(retrieved)
    if negative_ids is not None:
        rid = torch.tensor([r.video_id for r in retrieved])
        mask = negative_ids[None, :] != rid[:, None]
    else:
        mask = torch.ones(K, negatives.shape[0], dtype=torch.bool)
    per_v = _info_nce_terms(f_v.expand(K, -1), keys, negatives, tau, mask)
    per_tilde = _info_nce_terms(values, f_d.expand(K, -1), negatives, tau, mask)
    return (weights * (per_v + per_tilde)).sum()


def _info_nce_terms(anchors, positives, negatives, tau, mask) -> torch.Tensor:
    a = _unit(anchors)
    pos = (a * _unit(positives)).sum(-1) / tau
    neg = (a @ _unit(negatives).T / tau).masked_fill(~mask, float("-inf"))
    return torch.logsumexp(torch.cat([pos[:, None], neg], dim=1), dim=1) - pos


def batch_loss_vd_retrieved(
    f_v: torch.Tensor,
    f_d: torch.Tensor,
    results: Sequence[Sequence[Retrieved]],
    mode: str,
    tau: float,
    batch_video_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """Retrieval-corrected motion term over a batch of 2N rows (views i then j).

    ``results[n]`` holds the entries retrieved for view i of video n; ``f_v``/``f_d``
    are the (possibly refined) RGB and difference embeddings. Videos with an empty
    result use the plain cross-view pair.
    """
    n = f_v.shape[0] // 2
    if n < 2:
        raise BatchSizeError("need at least 2 videos per batch")
    if len(results) != n:
        raise ShapeError(f"expected {n} retrieval results, got {len(results)}")
    row_vid = torch.arange(2 * n) % n
    ids = torch.as_tensor(batch_video_ids) if batch_video_ids is not None else torch.arange(n)
    row_ids = ids[row_vid]
    losses = []
    for k in range(n):
        neg_rows = row_vid != k
        negatives = f_d[neg_rows]
        fallback = None
        if not results[k]:
            fallback = (
                _info_nce_terms(f_v[k:k + 1], f_d[n + k:n + k + 1], negatives, tau, torch.ones(1, len(negatives), dtype=torch.bool))
                + _info_nce_terms(f_v[n + k:n + k + 1], f_d[k:k + 1], negatives, tau, torch.ones(1, len(negatives), dtype=torch.bool))
            ).sum()
        losses.append(loss_vd_retrieved(f_v[k], f_d[k], results[k], mode, tau, negatives, row_ids[neg_rows], fallback))
    return torch.stack(losses).mean()


def loss_ac(a_v: torch.Tensor, a_s: torch.Tensor, a_d: torch.Tensor) -> torch.Tensor:
    """Mean |norm(A_v) - norm(A_s + A_d)|; the static/difference maps receive no gradient."""
    if not (a_v.shape == a_s.shape == a_d.shape):
        raise ShapeError(f"activation maps differ: {tuple(a_v.shape)}, {tuple(a_s.shape)}, {tuple(a_d.shape)}")
    target = minmax_normalize(a_s.detach() + a_d.detach())
    return (minmax_normalize(a_v) - target).abs().mean()


@dataclass
class LossReport:
    l_vv: torch.Tensor
    l_vs: torch.Tensor
    l_vd: torch.Tensor
    l_sd: torch.Tensor
    l_ac: torch.Tensor
    total: torch.Tensor
    lambda_ac: float
    use_refined: bool = False
    use_retrieval: bool = False
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in ("l_vv", "l_vs", "l_vd", "l_sd", "l_ac", "total")}
        out.update(lambda_ac=self.lambda_ac, use_refined=self.use_refined, use_retrieval=self.use_retrieval)
        out.update({k: float(v) for k, v in sorted(self.diagnostics.items())})
        return out

    def residual(self) -> float:
        """total - (l_vv + l_vs + l_vd - l_sd + lambda * l_ac); zero up to rounding."""
        return float(self.total - (self.l_vv + self.l_vs + self.l_vd - self.l_sd + self.lambda_ac * self.l_ac))


def total_objective(
    l_vs,
    l_vd,
    l_sd,
    l_ac,
    lambda_ac: float = 0.5,
    use_refined: bool = False,
    use_retrieval: bool = False,
    l_vv=0.0,
    diagnostics: dict[str, float] | None = None,
) -> LossReport:
    """(L_VV + L_VS + L_VD - L_SD) + lambda * L_ac. Disabled terms are passed as 0."""
    if lambda_ac < 0:
        raise ConfigError("lambda_ac", "must be >= 0")
    parts = [torch.as_tensor(x, dtype=torch.get_default_dtype()) if not isinstance(x, torch.Tensor) else x
             for x in (l_vv, l_vs, l_vd, l_sd, l_ac)]
    l_vv, l_vs, l_vd, l_sd, l_ac = parts
    total = (l_vv + l_vs + l_vd - l_sd) + lambda_ac * l_ac
    return LossReport(l_vv, l_vs, l_vd, l_sd, l_ac, total, lambda_ac, use_refined, use_retrieval, diagnostics or {})


@torch.no_grad()
def similarity_stats(emb_a: torch.Tensor, emb_b: torch.Tensor, pairing: torch.Tensor) -> tuple[float, float]:
    """Mean positive and mean cross-video cosine similarity (diagnostics only)."""
    sims = F.normalize(emb_a, dim=-1) @ F.normalize(emb_b, dim=-1).T
    vids = _video_ids(len(sims), None)
    rows = torch.arange(len(sims))
    neg = vids[:, None] != vids[None, :]
    return float(sims[rows, pairing].mean()), float(sims[neg].mean())
