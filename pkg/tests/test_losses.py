import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dclr.config import ConfigError
from dclr.errors import BatchSizeError
from dclr.losses import (
    Retrieved,
    batch_loss_vd_retrieved,
    cross_view_pairing,
    info_nce,
    loss_ac,
    loss_sd,
    loss_vd_retrieved,
    pairwise_nt_xent,
    retrieval_weights,
    same_view_pairing,
    total_objective,
)


@pytest.fixture(autouse=True)
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# ---- scalar oracles written with plain loops -------------------------------

def cos(a, b):
    a, b = list(map(float, a)), list(map(float, b))
    dot = sum(x * y for x, y in zip(a, b))
    return dot / math.sqrt(sum(x * x for x in a)) / math.sqrt(sum(y * y for y in b))


def nce_term(anchor, positive, negatives, tau):
    p = math.exp(cos(anchor, positive) / tau)
    z = p + sum(math.exp(cos(anchor, n) / tau) for n in negatives)
    return -math.log(p / z)


def oracle_info_nce(anchors, positives, negatives, tau):
    terms = [nce_term(anchors[i], positives[i], negatives[i], tau) for i in range(len(anchors))]
    return sum(terms) / len(terms)


def oracle_pairwise(emb_a, emb_b, pairing, tau):
    rows = len(emb_a)
    n = rows // 2
    vid = [r % n for r in range(rows)]
    total = 0.0
    for k in range(rows):
        negs = [emb_b[r] for r in range(rows) if vid[r] != vid[k]]
        total += nce_term(emb_a[k], emb_b[int(pairing[k])], negs, tau)
    return total / n


def oracle_minmax(a):
    lo, hi = min(a), max(a)
    if hi == lo:
        return [0.0] * len(a)
    return [(x - lo) / (hi - lo) for x in a]


def oracle_loss_ac(a_v, a_s, a_d):
    diffs = []
    for b in range(a_v.shape[0]):
        v = a_v[b].flatten().tolist()
        t = (a_s[b] + a_d[b]).flatten().tolist()
        diffs += [abs(x - y) for x, y in zip(oracle_minmax(v), oracle_minmax(t))]
    return sum(diffs) / len(diffs)


def rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).standard_normal(shape))


# ---- oracle equivalence ----------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_info_nce_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    na, m, d = rng.integers(1, 6), rng.integers(1, 8), rng.integers(2, 9)
    tau = float(rng.uniform(0.05, 1.0))
    a, p, n = rand(na, d, seed=seed), rand(na, d, seed=seed + 1000), rand(na, m, d, seed=seed + 2000)
    got = float(info_nce(a, p, n, tau))
    assert abs(got - oracle_info_nce(a, p, n, tau)) <= 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_info_nce_shared_negatives_with_mask(seed):
    rng = np.random.default_rng(seed)
    na, m, d = rng.integers(1, 5), rng.integers(2, 8), rng.integers(2, 6)
    a, p, n = rand(na, d, seed=seed), rand(na, d, seed=seed + 1), rand(m, d, seed=seed + 2)
    mask = torch.from_numpy(rng.random((na, m)) < 0.6)
    mask[:, 0] = True
    got = float(info_nce(a, p, n, 0.1, mask))
    negs = [[n[j] for j in range(m) if mask[i, j]] for i in range(na)]
    assert abs(got - oracle_info_nce(a, p, negs, 0.1)) <= 1e-6


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("same", [False, True])
def test_pairwise_nt_xent_matches_oracle(seed, same):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 9))
    tau = float(rng.uniform(0.05, 1.0))
    a, b = rand(2 * n, d, seed=seed), rand(2 * n, d, seed=seed + 7)
    pairing = same_view_pairing(n) if same else cross_view_pairing(n)
    got = float(pairwise_nt_xent(a, b, pairing, tau))
    assert abs(got - oracle_pairwise(a, b, pairing, tau)) <= 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_loss_sd_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 6)), int(rng.integers(2, 9))
    s, dd = rand(2 * n, d, seed=seed), rand(2 * n, d, seed=seed + 3)
    got = float(loss_sd(s, dd, 0.1))
    assert abs(got - oracle_pairwise(s, dd, list(range(2 * n)), 0.1)) <= 1e-6


def _hits(rng, k, d, seed):
    keys, vals = rand(k, d, seed=seed), rand(k, d, seed=seed + 1)
    sims = sorted(rng.uniform(-0.5, 1.0, k).tolist(), reverse=True)
    return [Retrieved(vals[i], keys[i], sims[i], int(rng.integers(100, 200))) for i in range(k)]


@pytest.mark.parametrize("seed", range(100))
@pytest.mark.parametrize("mode", ["top1", "topk_prior", "topk_uniform"])
def test_loss_vd_retrieved_matches_oracle(seed, mode):
    rng = np.random.default_rng(seed)
    k, m, d = int(rng.integers(1, 6)), int(rng.integers(1, 7)), int(rng.integers(2, 8))
    f_v, f_d = rand(d, seed=seed), rand(d, seed=seed + 5)
    negs = rand(m, d, seed=seed + 9)
    hits = _hits(rng, k, d, seed + 11)
    got = float(loss_vd_retrieved(f_v, f_d, hits, mode, 0.1, negs))

    used = hits[:1] if mode == "top1" else hits
    sims = [h.similarity for h in used]
    if mode == "top1":
        w = [1.0]
    elif mode == "topk_uniform" or any(x <= 0 for x in sims):
        w = [1.0 / len(used)] * len(used)
    else:
        w = [x / sum(sims) for x in sims]
    want = 0.0
    for wi, h in zip(w, used):
        want += wi * (nce_term(f_v, h.key, negs, 0.1) + nce_term(h.value, f_d, negs, 0.1))
    assert abs(got - want) <= 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_loss_ac_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    a_v, a_s, a_d = (rand(*shape, seed=seed + i).abs() for i in range(3))
    assert abs(float(loss_ac(a_v, a_s, a_d)) - oracle_loss_ac(a_v, a_s, a_d)) <= 1e-6


# ---- closed-form values ----------------------------------------------------

def test_equal_similarities_give_log_of_candidate_count():
    a = torch.tensor([[1.0, 0.0]])
    p = torch.tensor([[0.0, 1.0]])
    n = torch.tensor([[[0.0, 3.0], [0.0, 0.5]]])
    assert float(info_nce(a, p, n, 0.1)) == pytest.approx(math.log(3), abs=1e-12)


def test_aligned_positive_orthogonal_negatives():
    a = torch.tensor([[1.0, 0.0, 0.0]])
    p = torch.tensor([[2.0, 0.0, 0.0]])
    n = torch.tensor([[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
    assert float(info_nce(a, p, n, 1.0)) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)


def test_loss_ac_zero_when_maps_agree():
    a_s, a_d = rand(2, 2, 3, 3).abs(), rand(2, 2, 3, 3, seed=1).abs()
    assert float(loss_ac(3.0 * (a_s + a_d) + 1.0, a_s, a_d)) == pytest.approx(0.0, abs=1e-12)


def test_prior_weights_example():
    w = retrieval_weights([2.0, 1.0, 1.0], "topk_prior")
    assert w.tolist() == [0.5, 0.25, 0.25]


# ---- invariances -----------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_info_nce_scale_invariant(seed, ca, cp):
    a, p, n = rand(3, 4, seed=seed), rand(3, 4, seed=seed + 1), rand(3, 5, 4, seed=seed + 2)
    base = float(info_nce(a, p, n, 0.2))
    assert float(info_nce(ca * a, cp * p, 2.5 * n, 0.2)) == pytest.approx(base, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_info_nce_negative_order_irrelevant(seed):
    a, p, n = rand(2, 5, seed=seed), rand(2, 5, seed=seed + 1), rand(2, 6, 5, seed=seed + 2)
    perm = torch.from_numpy(np.random.default_rng(seed).permutation(6))
    assert float(info_nce(a, p, n[:, perm], 0.1)) == pytest.approx(float(info_nce(a, p, n, 0.1)), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pairwise_rotation_invariant(seed):
    a, b = rand(6, 4, seed=seed), rand(6, 4, seed=seed + 1)
    q, _ = torch.linalg.qr(rand(4, 4, seed=seed + 2))
    pairing = cross_view_pairing(3)
    assert float(pairwise_nt_xent(a @ q, b @ q, pairing, 0.1)) == pytest.approx(
        float(pairwise_nt_xent(a, b, pairing, 0.1)), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pairwise_video_relabel_invariant(seed):
    n = 4
    a, b = rand(2 * n, 5, seed=seed), rand(2 * n, 5, seed=seed + 1)
    perm = torch.from_numpy(np.random.default_rng(seed).permutation(n))
    rows = torch.cat([perm, perm + n])
    pairing = cross_view_pairing(n)
    assert float(pairwise_nt_xent(a[rows], b[rows], pairing, 0.1)) == pytest.approx(
        float(pairwise_nt_xent(a, b, pairing, 0.1)), abs=1e-9)


# ---- objective composition -------------------------------------------------

def test_total_decomposes_exactly():
    parts = [torch.tensor(x) for x in (1.25, 2.5, 0.75, 0.3)]
    rep = total_objective(*parts, lambda_ac=0.5, l_vv=torch.tensor(0.6))
    assert abs(rep.residual()) <= 1e-7
    assert float(rep.total) == pytest.approx(0.6 + 1.25 + 2.5 - 0.75 + 0.5 * 0.3, abs=1e-12)


def test_increasing_sd_lowers_total():
    a = total_objective(1.0, 1.0, 0.5, 0.0)
    b = total_objective(1.0, 1.0, 0.9, 0.0)
    assert float(b.total) < float(a.total)


def test_sd_term_gradient_pushes_pairs_apart():
    torch.manual_seed(0)
    s = torch.randn(6, 4, requires_grad=True)
    d = torch.randn(6, 4)
    rep = total_objective(0.0, 0.0, loss_sd(s, d, 0.1), 0.0, lambda_ac=0.0)
    rep.total.backward()
    with torch.no_grad():
        before = torch.nn.functional.cosine_similarity(s, d).mean()
        after = torch.nn.functional.cosine_similarity(s - 1e-3 * s.grad, d).mean()
    assert after < before


def test_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        total_objective(0.0, 0.0, 0.0, 0.0, lambda_ac=-0.1)


def test_single_video_batch_rejected():
    with pytest.raises(BatchSizeError):
        pairwise_nt_xent(rand(2, 3), rand(2, 3, seed=1), cross_view_pairing(1), 0.1)


def test_zero_vector_rejected():
    with pytest.raises(FloatingPointError):
        info_nce(torch.zeros(1, 3), rand(1, 3), rand(1, 2, 3), 0.1)


# ---- stop-gradient contract ------------------------------------------------

def test_loss_ac_gives_no_gradient_to_static_and_difference_maps():
    a_v = rand(2, 2, 3, 3).abs().requires_grad_()
    a_s = rand(2, 2, 3, 3, seed=1).abs().requires_grad_()
    a_d = rand(2, 2, 3, 3, seed=2).abs().requires_grad_()
    loss_ac(a_v, a_s, a_d).backward()
    assert a_v.grad is not None and a_v.grad.abs().sum() > 0
    assert a_s.grad is None or torch.equal(a_s.grad, torch.zeros_like(a_s))
    assert a_d.grad is None or torch.equal(a_d.grad, torch.zeros_like(a_d))


def test_retrieved_entries_receive_no_gradient():
    rng = np.random.default_rng(0)
    hits = _hits(rng, 3, 4, 5)
    for h in hits:
        h.key.requires_grad_()
        h.value.requires_grad_()
    f_v, f_d = rand(4).requires_grad_(), rand(4, seed=1).requires_grad_()
    loss_vd_retrieved(f_v, f_d, hits, "topk_prior", 0.1, rand(3, 4, seed=2)).backward()
    for h in hits:
        assert h.key.grad is None or torch.equal(h.key.grad, torch.zeros_like(h.key))
        assert h.value.grad is None or torch.equal(h.value.grad, torch.zeros_like(h.value))
    assert f_v.grad.abs().sum() > 0 and f_d.grad.abs().sum() > 0


def test_batch_retrieval_falls_back_when_nothing_retrieved():
    f_v, f_d = rand(6, 4), rand(6, 4, seed=1)
    plain = float(pairwise_nt_xent(f_v, f_d, cross_view_pairing(3), 0.1))
    got = float(batch_loss_vd_retrieved(f_v, f_d, [[], [], []], "topk_prior", 0.1))
    assert got == pytest.approx(plain, abs=1e-9)
