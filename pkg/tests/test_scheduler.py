import csv
import io
import logging
from collections import Counter

import numpy as np
import pytest

from growtas.data import Dataset
from growtas.errors import ConfigurationError, InputError
from growtas.rng import SeededRng
from growtas.scheduler import (FinetuneConfig, Schedule, TrainingAborted, build_freeze_mask, cosine_lr,
                               finetune_plus, log_to_csv, sample_complement, stage_at, train_grow_tas,
                               train_uniform)
from growtas.space import (Architecture, SubspacePartition, enumerate_space, toy_partition, toy_space)
from growtas.supernet import OptimConfig, forward, init_weights

OPT = OptimConfig(lr=3e-3, min_lr=1e-4, weight_decay=0.01, batch_size=16)


@pytest.fixture
def data():
    r = np.random.default_rng(0)
    return Dataset(r.normal(size=(64, 8, 8)), r.integers(0, 4, 64), 4)


# ---------------------------------------------------------------- schedule
def test_stage_at_examples():
    s = Schedule.two_stage(500, 250)
    assert stage_at(s, 0) == 1
    assert stage_at(s, 249) == 1
    assert stage_at(s, 250) == 2
    assert stage_at(s, 499) == 2
    with pytest.raises(InputError):
        stage_at(s, 500)
    with pytest.raises(InputError):
        stage_at(s, -1)


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        Schedule((0, 5, 5))
    with pytest.raises(ConfigurationError):
        Schedule((1, 5))
    assert Schedule.single(7).K == 1


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 10, 1.0, 0.1) == 1.0
    assert cosine_lr(9, 10, 1.0, 0.1) == pytest.approx(0.1)
    assert cosine_lr(0, 1, 0.5, 0.0) == 0.5
    vals = [cosine_lr(i, 50, 1.0, 0.0) for i in range(50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- training
def test_log_audit_no_out_of_stage_samples(data):
    sp, part = toy_space(), toy_partition()
    sched = Schedule.two_stage(4, 2)
    recs = train_grow_tas(init_weights(sp, 0), sp, part, sched, data, OPT, SeededRng(1))
    assert len(recs) == 4 * 4
    for r in recs:
        assert r.stage == sched.stage_at(r.epoch)
        assert part.member(r.arch, r.stage)
    assert any(not part.member(r.arch, 1) for r in recs if r.stage == 2)


def test_single_stage_equals_uniform_baseline(data):
    sp = toy_space()
    a, b = init_weights(sp, 0), init_weights(sp, 0)
    ra = train_grow_tas(a, sp, SubspacePartition.single(sp), Schedule.single(3), data, OPT, SeededRng(4))
    rb = train_uniform(b, sp, 3, data, OPT, SeededRng(4))
    assert [r.arch for r in ra] == [r.arch for r in rb]
    assert a.equals(b)


def test_stage_mismatch_is_configuration_error(data):
    sp = toy_space()
    with pytest.raises(ConfigurationError):
        train_grow_tas(init_weights(sp, 0), sp, toy_partition(), Schedule.single(2), data, OPT, SeededRng(0))


def test_log_csv_columns(data):
    sp = toy_space()
    recs = train_uniform(init_weights(sp, 0), sp, 1, data, OPT, SeededRng(0))
    text = log_to_csv(recs)
    assert text.splitlines()[0] == "epoch,stage,step,arch_hash,arch,loss"
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == len(recs)
    assert rows[0]["arch"] == recs[0].arch.encode()
    assert float(rows[0]["loss"]) == recs[0].loss


def test_stop_and_resume_matches_straight_run(data):
    sp, part = toy_space(), toy_partition()
    sched = Schedule.two_stage(4, 2)
    straight = init_weights(sp, 0)
    r1 = train_grow_tas(straight, sp, part, sched, data, OPT, SeededRng(1))
    half = init_weights(sp, 0)
    rng = SeededRng(1)
    r2 = train_grow_tas(half, sp, part, sched, data, OPT, rng, stop_epoch=2)
    resumed = SeededRng.from_state(1, rng.get_state())
    r2 += train_grow_tas(half, sp, part, sched, data, OPT, resumed, start_epoch=2)
    assert straight.equals(half) and half.epoch == 4
    assert log_to_csv(r1) == log_to_csv(r2)


def test_numeric_abort_carries_last_good_epoch(data):
    sp = toy_space()
    seen = {}

    def poison(t, w, rng):
        seen["after0"] = w.copy()
        data.x[3, 0, 0] = np.nan

    with pytest.raises(TrainingAborted) as err:
        train_uniform(init_weights(sp, 0), sp, 3, data, OPT, SeededRng(0), on_epoch_end=poison)
    assert err.value.epoch == 1
    assert err.value.last_good.equals(seen["after0"])
    assert err.value.last_good.epoch == 1


# ------------------------------------------------------------- fine-tuning
def test_freeze_mask_geometry():
    sp, part = toy_space(), toy_partition()
    mask = build_freeze_mask(sp, part)
    w = init_weights(sp, 0)
    assert mask.extents("blocks.0.attn.wq") == (8, 8)
    assert mask.extents("blocks.0.mlp.w1") == (8, 8)
    assert mask.extents("embed.w") == (8, 8)
    frozen = sum(int(mask.mask(n, p.shape).sum()) for n, p in w.params.items())
    free = sum(int((~mask.mask(n, p.shape)).sum()) for n, p in w.params.items())
    assert frozen + free == sum(p.size for p in w.params.values())
    # every A_1 member lies inside the frozen region
    for a in enumerate_space(sp):
        if part.member(a, 1):
            assert w.slice(a).issubset(mask)


def test_freeze_mask_needs_two_stages():
    sp = toy_space()
    with pytest.raises(ConfigurationError):
        build_freeze_mask(sp, SubspacePartition.single(sp))


def test_complement_sampling():
    sp, part = toy_space(), toy_partition()
    rng = SeededRng(0)
    draws = [sample_complement(sp, part, rng) for _ in range(3000)]
    assert not any(part.member(a, 1) for a in draws)
    c = Counter(a.encode() for a in draws)
    outside = [a.encode() for a in enumerate_space(sp) if not part.member(a, 1)]
    assert set(c) == set(outside)


def test_complement_sampling_fails_when_a1_is_everything():
    sp = toy_space()
    part = SubspacePartition((16, 16), (2, 2))
    with pytest.raises(ConfigurationError):
        sample_complement(sp, part, SeededRng(0), max_tries=50)


def test_finetune_freezes_a1_exactly(data):
    sp, part = toy_space(), toy_partition()
    w = init_weights(sp, 0)
    train_grow_tas(w, sp, part, Schedule.two_stage(2, 1), data, OPT, SeededRng(1))
    before = w.copy()
    mask = build_freeze_mask(sp, part)
    recs = finetune_plus(w, sp, part, mask, data, FinetuneConfig(2), OPT, SeededRng(2))
    assert recs and all(not part.member(r.arch, 1) for r in recs)
    for key, arr in w.arrays():
        name = key.split("/", 1)[1]
        m = mask.mask(name, arr.shape)
        assert arr[m].tobytes() == dict(before.arrays())[key][m].tobytes()
    x = data.x[:16]
    changed = 0
    for a in enumerate_space(sp):
        same = forward(w, a, x)[0].tobytes() == forward(before, a, x)[0].tobytes()
        if part.member(a, 1):
            assert same
        else:
            changed += not same
    assert changed > 0


def test_finetune_zero_epochs_is_identity(data):
    sp, part = toy_space(), toy_partition()
    w = init_weights(sp, 0)
    before = w.copy()
    assert finetune_plus(w, sp, part, build_freeze_mask(sp, part), data, FinetuneConfig(0), OPT, SeededRng(0)) == []
    assert w.equals(before)


def test_finetune_degenerate_caps_is_noop(data, caplog):
    sp = toy_space()
    part = SubspacePartition((16, 16), (2, 2))
    w = init_weights(sp, 0)
    before = w.copy()
    with caplog.at_level(logging.WARNING):
        assert finetune_plus(w, sp, part, build_freeze_mask(sp, part), data, FinetuneConfig(1), OPT,
                             SeededRng(0)) == []
    assert w.equals(before) and "nothing to train" in caplog.text


def test_finetune_rejects_foreign_mask(data):
    sp, part = toy_space(), toy_partition()
    other = SubspacePartition((16, 16), (1, 2))
    with pytest.raises(ConfigurationError):
        finetune_plus(init_weights(sp, 0), sp, part, build_freeze_mask(sp, other), data, FinetuneConfig(1), OPT,
                      SeededRng(0))
