import csv
import io

import numpy as np
import pytest

from growtas.errors import ConfigurationError, InputError
from growtas.evo import EvoConfig
from growtas.experiments import (StudySettings, TaskParams, accuracy_distribution_study, cosine_similarity_study,
                                 generate_task, grow_crop_study, summarize, token_cosine, train_supernet,
                                 transition_ablation)
from growtas.rng import SeededRng
from growtas.scheduler import train_standalone
from growtas.space import Architecture, toy_partition, toy_space
from growtas.supernet import OptimConfig, evaluate, init_weights

QUICK = StudySettings(epochs=2, t1=1, finetune_epochs=1,
                      opt=OptimConfig(lr=3e-3, min_lr=1e-4, weight_decay=0.01, batch_size=32))


@pytest.fixture(scope="module")
def small_task():
    return generate_task(TaskParams(n_train=128, n_val=64, n_test=64, seed=3))


def trained(space, arch, task, epochs, seed=0):
    w = init_weights(space, seed, arch=arch)
    train_standalone(w, arch, epochs, task.train, OptimConfig(lr=3e-3, min_lr=1e-4, weight_decay=0.01),
                     SeededRng(seed))
    return w


# --------------------------------------------------------------------- task
def test_task_is_reproducible_and_splits_disjoint():
    a, b = generate_task(TaskParams(n_train=50, n_val=20, n_test=20)), generate_task(TaskParams(n_train=50, n_val=20, n_test=20))
    assert a.train.x.tobytes() == b.train.x.tobytes() and a.test.x.tobytes() == b.test.x.tobytes()
    rows = {r.tobytes() for ds in (a.train, a.val, a.test) for r in ds.x}
    assert len(rows) == 90


def test_task_validation():
    with pytest.raises(ConfigurationError):
        TaskParams(separation=0.0)
    with pytest.raises(ConfigurationError):
        TaskParams(num_classes=1)


def test_large_separation_is_easy():
    sp = toy_space()
    task = generate_task(TaskParams(separation=10.0, n_train=512, n_val=64, n_test=256))
    w = trained(sp, sp.min_arch, task, 20)
    assert evaluate(w, sp.min_arch, task.test)[0] >= 0.97


def test_identical_classes_are_chance():
    sp = toy_space()
    task = generate_task(TaskParams(separation=1e-9, n_train=256, n_val=64, n_test=2000))
    w = trained(sp, sp.max_arch, task, 3)
    acc = evaluate(w, sp.max_arch, task.test)[0]
    assert abs(acc - 0.25) < 3 * np.sqrt(0.25 * 0.75 / 2000) + 0.01


def test_default_task_reaches_ninety_percent():
    sp = toy_space()
    task = generate_task(TaskParams())
    w = init_weights(sp, 0)
    train_standalone(w, sp.max_arch, 20, task.train, OptimConfig(lr=3e-3, min_lr=1e-4, weight_decay=0.01),
                     SeededRng(0))
    assert evaluate(w, sp.max_arch, task.test)[0] >= 0.9


# ------------------------------------------------------------------ reports
def test_summary_recomputable_from_records(small_task):
    sp = toy_space()
    rep, _ = grow_crop_study(sp, small_task, 3, 0, QUICK)
    rows = list(csv.DictReader(io.StringIO(rep.csv_text())))
    grow_acc = [float(r["accuracy"]) for r in rows if r["kind"] == "grow"]
    assert summarize(grow_acc) == rep.summary["grow"]
    assert rep.summary["grow_gap"] == float(np.mean(grow_acc)) - rep.summary["reference_small"]


def test_grow_to_same_arch_equals_reference(small_task):
    sp = toy_space()
    rep, _ = grow_crop_study(sp, small_task, 1, 0, QUICK, grow_targets=[sp.min_arch], crop_targets=[sp.max_arch])
    assert rep.summary["grow"]["mean"] == rep.summary["reference_small"]
    assert rep.summary["crop"]["mean"] == rep.summary["reference_large"]


def test_study_rerun_is_byte_identical(small_task, tmp_path):
    sp = toy_space()
    a, _ = grow_crop_study(sp, small_task, 2, 5, QUICK)
    b, _ = grow_crop_study(sp, small_task, 2, 5, QUICK)
    pa, pb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    assert pa.name == pb.name == f"grow_crop_{a.config_hash}.csv"
    assert pa.read_bytes() == pb.read_bytes()


def test_study_rejects_zero_variants(small_task):
    with pytest.raises(InputError):
        grow_crop_study(toy_space(), small_task, 0, 0, QUICK)


# ------------------------------------------------------------------- cosine
def test_token_cosine_identity_and_range(rng):
    a = rng.normal(size=(3, 5, 16))
    np.testing.assert_allclose(token_cosine(a, a), 1.0, rtol=1e-14)
    s = token_cosine(a, rng.normal(size=(3, 5, 8)))
    assert s.shape == (15,) and np.all(np.abs(s) <= 1)


def test_token_cosine_random_vectors_near_zero(rng):
    d = 64
    s = token_cosine(rng.normal(size=(4000, d)), rng.normal(size=(4000, d)))
    assert abs(s.mean()) < 3 / np.sqrt(d) / np.sqrt(4000)


def test_cosine_variant_equal_to_reference(small_task):
    sp = toy_space()
    w = init_weights(sp, 0, init_scale=0.3, arch=sp.min_arch)
    rep = cosine_similarity_study(w, sp.min_arch, [sp.min_arch], small_task.val.x[:8], "grow")
    for b in range(sp.min_arch.depth):
        assert rep.summary[f"block{b}"]["mean"] == pytest.approx(1.0, abs=1e-12)
    rep = cosine_similarity_study(w, sp.min_arch, [sp.min_arch], small_task.val.x[:8], "crop")
    assert rep.summary["block1"]["min"] == pytest.approx(1.0, abs=1e-12)


def test_cosine_mode_validation(small_task):
    sp = toy_space()
    with pytest.raises(InputError):
        cosine_similarity_study(init_weights(sp, 0), sp.max_arch, [], small_task.val.x[:2], "stretch")


# ------------------------------------------------------------- distribution
def test_distribution_single_sample(small_task):
    sp = toy_space()
    w = init_weights(sp, 0)
    rep = accuracy_distribution_study(w, sp, None, 1, small_task.val, 0)
    assert len(rep.records) == 1
    assert rep.summary["accuracy"]["mean"] == rep.records[0]["accuracy"]


def test_distribution_same_seed_identical_and_constraint(small_task):
    sp = toy_space()
    w = init_weights(sp, 0)
    a = accuracy_distribution_study(w, sp, 2000, 20, small_task.val, 4)
    b = accuracy_distribution_study(w, sp, 2000, 20, small_task.val, 4)
    assert a.csv_text() == b.csv_text() and a.config_hash == b.config_hash
    assert all(r["params"] <= 2000 for r in a.records)
    with pytest.raises(ConfigurationError):
        accuracy_distribution_study(w, sp, 10, 5, small_task.val, 0)


# ----------------------------------------------------------------- ablation
def test_ablation_grid_shape_and_boundary_flag(small_task):
    sp, part = toy_space(), toy_partition()
    s = StudySettings(epochs=3, t1=1, finetune_epochs=1, opt=QUICK.opt)
    evo = EvoConfig(population_size=6, generations=2, parent_count=2)
    rep = transition_ablation(sp, part, small_task, [1, 2], [1500, 4000], 0, s, True, evo)
    assert rep.summary["shape"] == [2, 2]
    assert len(rep.records) == 2 * 2 * 2
    flagged = {r["t1"] for r in rep.records if r["flag"]}
    assert flagged == {2}
    assert all(r["params"] <= r["param_limit"] for r in rep.records)


def test_ablation_rejects_out_of_range_t1(small_task):
    with pytest.raises(InputError):
        transition_ablation(toy_space(), toy_partition(), small_task, [0], [2000], 0, QUICK)


def test_train_supernet_progressive_vs_uniform_differ(small_task):
    sp, part = toy_space(), toy_partition()
    a = train_supernet(sp, part, small_task, QUICK, 0, True)
    b = train_supernet(sp, part, small_task, QUICK, 0, False)
    assert not a.equals(b)
    assert train_supernet(sp, part, small_task, QUICK, 0, True).equals(a)
