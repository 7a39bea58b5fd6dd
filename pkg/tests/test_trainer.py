import io
import json

import pytest
import torch

from dclr.errors import IntegrityError, TrainingDiverged
from dclr.trainer import Trainer, load_checkpoint, save_checkpoint, schedule_flags

from helpers import tiny_config, tiny_dataset


@pytest.fixture(scope="module")
def data():
    return tiny_dataset()


def params(enc):
    return [p.detach().clone() for p in enc.parameters()]


def test_zero_learning_rate_leaves_weights_unchanged(data):
    tr = Trainer(tiny_config(train__learning_rate=0.0), data)
    before = params(tr.encoder)
    tr.train_epoch(0)
    assert all(torch.equal(a, b) for a, b in zip(before, params(tr.encoder)))


def test_a_step_changes_weights(data):
    tr = Trainer(tiny_config(), data)
    before = params(tr.encoder)
    tr.train_step(tr.make_batch([0, 1, 2, 3], 0), 0)
    assert any(not torch.equal(a, b) for a, b in zip(before, params(tr.encoder)))


def ten_steps(data):
    tr = Trainer(tiny_config(train__warmup_epochs=0), data)
    out = []
    for step in range(10):
        ids = [(step + k) % len(data) for k in range(4)]
        out.append(tr.train_step(tr.make_batch(ids, step // 5), step // 5).to_dict())
    return out


def test_ten_step_trace_is_reproducible(data):
    assert ten_steps(data) == ten_steps(data)


def test_schedule_flags():
    cfg = tiny_config(train__epochs=10).train
    assert cfg.effective_warmup == 2
    assert schedule_flags(1, cfg) == (False, False)
    assert schedule_flags(2, cfg) == (True, True)
    cfg = tiny_config(train__epochs=10, train__warmup_epochs=4).train
    assert schedule_flags(3, cfg) == (False, False) and schedule_flags(4, cfg) == (True, True)


def test_retrieval_kicks_in_after_warmup(data):
    tr = Trainer(tiny_config(train__epochs=3, train__warmup_epochs=1), data)
    e0 = tr.train_epoch(0)
    assert len(tr.state.queue) > 0
    batch = tr.make_batch([0, 1, 2, 3], 1)
    report, _ = tr.compute_losses(batch, True, True)
    assert report.use_retrieval and report.use_refined
    assert report.diagnostics["retrieval_hits"] > 0
    assert e0["l_vd"] > 0


def test_total_matches_parts_every_step(data):
    tr = Trainer(tiny_config(train__warmup_epochs=0), data)
    rep = tr.train_step(tr.make_batch([0, 1, 2, 3], 0), 0)
    assert abs(rep.residual()) <= 1e-6


def test_epoch_summary_and_metrics_stream(data):
    tr = Trainer(tiny_config(), data)
    buf = io.StringIO()
    tr.train_epoch(0, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["type"] for r in rows] == ["step", "step", "epoch"]
    assert rows[-1]["steps"] == 2


def test_checkpoint_round_trip(tmp_path, data):
    tr = Trainer(tiny_config(), data)
    tr.train_epoch(0)
    path = tr.save_checkpoint(tmp_path / "a.pt")
    m = load_checkpoint(path)
    assert m["epoch"] == 0
    other = Trainer(tiny_config(), data)
    other.load_state(m)
    for a, b in zip(tr.encoder.state_dict().values(), other.encoder.state_dict().values()):
        assert torch.equal(a, b)
    assert len(other.state.queue) == len(tr.state.queue)


def test_resume_continues_identically(tmp_path, data):
    straight = Trainer(tiny_config(train__warmup_epochs=1), data)
    straight.fit()

    first = Trainer(tiny_config(train__warmup_epochs=1), data)
    first.train_epoch(0)
    first.save_checkpoint(tmp_path / "mid.pt")
    resumed = Trainer(tiny_config(train__warmup_epochs=1), data)
    resumed.resume(tmp_path / "mid.pt")
    assert resumed.state.epoch == 0
    resumed.fit()
    assert resumed.state.epoch == straight.state.epoch == 1
    for a, b in zip(straight.encoder.state_dict().values(), resumed.encoder.state_dict().values()):
        assert torch.equal(a, b)


def test_config_hash_mismatch_rejected(tmp_path, data):
    tr = Trainer(tiny_config(), data)
    path = tr.save_checkpoint(tmp_path / "a.pt")
    with pytest.raises(IntegrityError):
        Trainer(tiny_config(train__learning_rate=0.5), data).resume(path)
    with pytest.raises(IntegrityError):
        load_checkpoint(path, expected_config_hash="0" * 16)


def test_corrupt_checkpoint_rejected(tmp_path, data):
    tr = Trainer(tiny_config(), data)
    path = tr.save_checkpoint(tmp_path / "a.pt")
    wrapper = torch.load(path, weights_only=False)
    payload = bytearray(wrapper["payload"])
    payload[len(payload) // 2] ^= 0xFF
    wrapper["payload"] = bytes(payload)
    torch.save(wrapper, tmp_path / "bad.pt")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "bad.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "junk.pt")
    m = load_checkpoint(path)
    wrapper = torch.load(path, weights_only=False)
    wrapper["version"] = 99
    torch.save(wrapper, tmp_path / "v99.pt")
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "v99.pt")
    assert m["config_hash"] == tr.cfg.hash()


def test_module_level_save_is_atomic(tmp_path):
    p = save_checkpoint(tmp_path / "x.pt", {"config_hash": "abc", "epoch": 3})
    assert load_checkpoint(p)["epoch"] == 3
    assert not list(tmp_path.glob("*.tmp"))


def test_non_finite_loss_aborts_with_context(data):
    tr = Trainer(tiny_config(), data)
    with torch.no_grad():
        next(tr.encoder.parameters()).fill_(float("nan"))
    buf = io.StringIO()
    with pytest.raises(TrainingDiverged, match="videos"):
        tr.train_epoch(0, buf)
    row = json.loads(buf.getvalue().splitlines()[-1])
    assert row["type"] == "diverged" and row["epoch"] == 0 and len(row["video_ids"]) == 4
