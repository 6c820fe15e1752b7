import json
import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binomtest

from debrisseg.annotation import DatasetManifest, DatasetRecord
from debrisseg.errors import (
    CheckpointWriteError,
    ConfigurationError,
    ContractError,
    NonFiniteLossError,
    TrainingPreconditionError,
)
from debrisseg.promptcraft import build_pools
from debrisseg.segmodel import DecoderConfig, MockBackend, build_decoder, load_checkpoint
from debrisseg.synthetic import synth_tile
from debrisseg.trainer import (
    CheckpointRecord,
    TrainConfig,
    TrainingSet,
    bce_loss,
    cosine_lr,
    sample_training_batch,
    select_checkpoint,
    train,
)

mpmath.mp.dps = 50

TINY = dict(token_dim=8, encoder_dim=12, num_heads=2, intermediate_dim=16)


# ---------------------------------------------------------------- schedule


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 1000) == 1e-3
    assert cosine_lr(1000, 1000) == 1e-4
    assert abs(cosine_lr(500, 1000) - 5.5e-4) < 1e-12
    with pytest.raises(ContractError):
        cosine_lr(1001, 1000)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10_000), st.data())
def test_cosine_lr_monotone_and_bounded(total, data):
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    la, lb = cosine_lr(a, total), cosine_lr(b, total)
    assert 1e-4 - 1e-18 <= lb <= la <= 1e-3 + 1e-18


# ---------------------------------------------------------------- loss


def naive_bce(z, y):
    z, y = mpmath.mpf(z), mpmath.mpf(y)
    p = 1 / (1 + mpmath.exp(-z))
    return -(y * mpmath.log(p) + (1 - y) * mpmath.log(1 - p))


@settings(max_examples=300, deadline=None)
@given(st.floats(-15, 15), st.sampled_from([0.0, 1.0]))
def test_bce_matches_high_precision(z, y):
    got = bce_loss(torch.tensor([z], dtype=torch.float64), torch.tensor([y], dtype=torch.float64)).item()
    want = float(naive_bce(z, y))
    assert abs(got - want) <= 1e-10 * abs(want) + 1e-300


@pytest.mark.parametrize("y", [0.0, 0.3, 1.0])
def test_bce_at_zero_logit(y):
    got = bce_loss(torch.zeros(4, dtype=torch.float64), torch.full((4,), y, dtype=torch.float64)).item()
    assert abs(got - math.log(2)) < 1e-12


def test_bce_extreme_logits_finite():
    z = torch.tensor([-1e4, 1e4], dtype=torch.float32)
    assert torch.isfinite(bce_loss(z, torch.tensor([1.0, 0.0])))


# ---------------------------------------------------------------- data helpers


def _dataset(n_train=6, n_val=2, size=32, seed=0):
    rng = np.random.default_rng(seed)
    data, records = {}, []
    for i in range(n_train + n_val + 1):
        img, truth = synth_tile(rng, size, positive=i % 2 == 0)
        iid = f"s{i:02d}"
        data[iid] = (img, truth)
        split = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
        event = "Ida" if split == "test" else "Ian"
        records.append(DatasetRecord(iid, event, "r", "", split=split, is_positive=bool(truth.any())))
    manifest = DatasetManifest(records, "Ida")
    loader = lambda rec: data[rec.image_id]  # noqa: E731
    pools = build_pools(manifest, 0.2, 5.0, size, loader=loader)
    return TrainingSet.from_manifest(manifest, size, loader=loader), pools


def _config(**kw):
    base = dict(batch_size=4, epochs=3, seed=0, deterministic=True, checkpoint_every=2, mixed_precision=False)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- sampling


def test_level_frequencies_uniform():
    data, pools = _dataset()
    rng = np.random.default_rng(0)
    n = 3000
    batch = sample_training_batch(data.train_ids, data.consensus, pools, rng, n)
    counts = np.bincount([s.level for s in batch], minlength=3)
    for c in counts:
        assert binomtest(int(c), n, 1 / 3).pvalue > 1e-4
    weighted = sample_training_batch(data.train_ids, data.consensus, pools, rng, n, (0, 1, 3))
    wc = np.bincount([s.level for s in weighted], minlength=3)
    assert wc[0] == 0 and binomtest(int(wc[2]), n, 0.75).pvalue > 1e-4


def test_samples_are_well_formed():
    data, pools = _dataset()
    for s in sample_training_batch(data.train_ids, data.consensus, pools, np.random.default_rng(1), 500):
        assert 0.0 <= s.alpha <= 1.0
        assert s.visual_prompt_id in pools.ids(s.level)
        if len(pools.ids(s.level)) > 1:
            assert s.visual_prompt_id != s.query_image_id
        np.testing.assert_array_equal(s.gt_binary, (data.consensus[s.query_image_id] == s.level).astype(np.uint8))


# ---------------------------------------------------------------- loop


def test_train_writes_checkpoints_and_log(tmp_path):
    data, pools = _dataset()
    backend = MockBackend(hidden_dim=12)
    dec = build_decoder(DecoderConfig(**TINY))
    digest = backend.weights_digest()
    records = train(_config(), data, pools, backend, dec, tmp_path, tmp_path / "log.jsonl")
    assert [r.epoch for r in records] == [0, 1, 2]
    assert backend.weights_digest() == digest
    assert records[0].checkpoint_path and records[-1].checkpoint_path
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == 3 * 2 and set(lines[0]) == {"epoch", "step", "lr", "loss", "val_dice"}
    assert lines[0]["lr"] == 1e-3 and lines[1]["val_dice"] is not None
    best = select_checkpoint(records)
    loaded, meta = load_checkpoint(best.checkpoint_path)
    assert meta["epoch"] == best.epoch


def test_resume_matches_uninterrupted_run(tmp_path, monkeypatch):
    data, pools = _dataset()
    full = build_decoder(DecoderConfig(**TINY))
    rec_full = train(_config(epochs=4), data, pools, MockBackend(hidden_dim=12), full, tmp_path / "a")

    import debrisseg.trainer as trainer_mod

    real_log = trainer_mod._append_log

    def crash_in_epoch_2(path, entry):
        if entry["epoch"] == 2:
            raise KeyboardInterrupt
        real_log(path, entry)

    monkeypatch.setattr(trainer_mod, "_append_log", crash_in_epoch_2)
    part = build_decoder(DecoderConfig(**TINY))
    with pytest.raises(KeyboardInterrupt):
        train(_config(epochs=4), data, pools, MockBackend(hidden_dim=12), part, tmp_path / "b")
    monkeypatch.setattr(trainer_mod, "_append_log", real_log)
    resumed = build_decoder(DecoderConfig(**TINY))
    rec_res = train(_config(epochs=4), data, pools, MockBackend(hidden_dim=12), resumed, tmp_path / "b", resume=True)
    assert [r.val_debris_dice for r in rec_res] == [r.val_debris_dice for r in rec_full]
    for k, v in full.state_dict().items():
        assert torch.equal(v, resumed.state_dict()[k]), k


def test_resume_without_state(tmp_path):
    data, pools = _dataset()
    with pytest.raises(TrainingPreconditionError):
        train(_config(), data, pools, MockBackend(hidden_dim=12), build_decoder(DecoderConfig(**TINY)), tmp_path, resume=True)


def test_zero_epochs_is_noop():
    data, pools = _dataset()
    dec = build_decoder(DecoderConfig(**TINY))
    before = {k: v.clone() for k, v in dec.state_dict().items()}
    assert train(_config(epochs=0), data, pools, MockBackend(hidden_dim=12), dec) == []
    assert all(torch.equal(before[k], v) for k, v in dec.state_dict().items())


def test_empty_validation_rejected():
    data, pools = _dataset()
    data.val_ids = []
    with pytest.raises(TrainingPreconditionError, match="validation"):
        train(_config(), data, pools, MockBackend(hidden_dim=12), build_decoder(DecoderConfig(**TINY)))


def test_non_finite_loss_aborts():
    data, pools = _dataset()
    dec = build_decoder(DecoderConfig(**TINY))
    with torch.no_grad():
        dec.film_add.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as info:
        train(_config(), data, pools, MockBackend(hidden_dim=12), dec)
    assert info.value.epoch == 0


def test_checkpoint_write_failure(tmp_path):
    data, pools = _dataset()
    (tmp_path / "epoch_00000.npz").mkdir()
    with pytest.raises(CheckpointWriteError):
        train(_config(), data, pools, MockBackend(hidden_dim=12), build_decoder(DecoderConfig(**TINY)), tmp_path)


# ---------------------------------------------------------------- selection and config


def test_select_checkpoint_tie_break():
    recs = [CheckpointRecord(e, d) for e, d in enumerate([0.2, 0.7, 0.5, 0.7, 0.1])]
    assert select_checkpoint(recs).epoch == 1
    assert select_checkpoint(list(reversed(recs))).epoch == 1
    with pytest.raises(ContractError):
        select_checkpoint([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=30))
def test_select_checkpoint_property(dices):
    recs = [CheckpointRecord(e, d) for e, d in enumerate(dices)]
    assert select_checkpoint(recs).epoch == dices.index(max(dices))


def test_train_config_roundtrip_and_validation():
    cfg = _config(level_weights=(1.0, 2.0, 1.0))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(level_weights=(0, 0, 0))
