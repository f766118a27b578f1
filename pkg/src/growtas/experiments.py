"""Synthetic task and the diagnostic studies (grow/crop, cosine similarity,
accuracy distribution, transition-step ablation)."""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, InputError
from .evo import EvoConfig, search_supernet
from .rng import SeededRng
from .scheduler import (FinetuneConfig, Schedule, build_freeze_mask, finetune_plus, train_grow_tas,
                        train_standalone, train_uniform)
from .space import Architecture, SearchSpace, enumerate_space, param_count, sample_uniform
from .supernet import OptimConfig, SupernetWeights, block_features, crop, evaluate, grow, init_weights


@dataclass(frozen=True)
class TaskParams:
    """Class-conditional Gaussian-mixture token sequences.

    Class ``c`` owns a direction ``u_c`` (unit norm). Every token of a
    class-``c`` sequence is ``s * separation * u_c + noise * N(0, I)`` with an
    independent random sign ``s``, so all class means coincide at zero and the
    label is only recoverable through per-token nonlinear features.
    """

    seq_len: int = 8
    input_dim: int = 8
    num_classes: int = 4
    separation: float = 1.7
    noise: float = 1.0
    n_train: int = 2048
    n_val: int = 512
    n_test: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if not self.separation > 0:
            raise ConfigurationError(f"separation must be positive, got {self.separation}")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")
        for n in ("seq_len", "input_dim", "n_train", "n_val", "n_test"):
            if getattr(self, n) < 1:
                raise ConfigurationError(f"{n} must be >= 1")


@dataclass
class SyntheticTask:
    params: TaskParams
    directions: np.ndarray
    train: Dataset
    val: Dataset
    test: Dataset


def generate_task(params: TaskParams, directions: np.ndarray | None = None) -> SyntheticTask:
    """Draw directions, then train, val and test splits from one Philox stream.

    The splits are consecutive, non-overlapping segments of the stream, so
    they are disjoint by construction and regenerate bit-identically.
    """
    rng = SeededRng(params.seed)
    C, d, L = params.num_classes, params.input_dim, params.seq_len
    if directions is None:
        directions = rng.normal((C, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    def split(n):
        y = rng.gen.integers(0, C, size=n)
        signs = np.where(rng.gen.random((n, L)) < 0.5, -1.0, 1.0)
        x = signs[..., None] * params.separation * directions[y][:, None, :]
        x = x + params.noise * rng.normal((n, L, d))
        return Dataset(x, y, C)

    return SyntheticTask(params, directions, split(params.n_train), split(params.n_val), split(params.n_test))


# ------------------------------------------------------------------ reporting
STAT_KEYS = ("mean", "std", "min", "max")


def summarize(values) -> dict:
    """Population statistics (std with ddof=0) of a non-empty sequence."""
    a = np.asarray(list(values), dtype=np.float64)
    return {"n": int(a.size), "mean": float(a.mean()), "std": float(a.std()),
            "min": float(a.min()), "max": float(a.max())}


@dataclass
class StudyReport:
    """Raw per-sample records plus summary statistics derived from them."""

    name: str
    records: list
    summary: dict
    config_hash: str

    def csv_text(self) -> str:
        buf = io.StringIO()
        fields = list(self.records[0]) if self.records else []
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for rec in self.records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [f"study: {self.name}", f"config: {self.config_hash}"]
        for group, stats in self.summary.items():
            if isinstance(stats, dict):
                body = " ".join(f"{k}={v!r}" for k, v in stats.items())
            else:
                body = repr(stats)
            lines.append(f"{group}: {body}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{self.name}_{self.config_hash}.csv"
        path.write_text(self.csv_text())
        (out / f"{self.name}_{self.config_hash}.txt").write_text(self.summary_text())
        return path


@dataclass
class StudySettings:
    """Training budget shared by the studies."""

    epochs: int = 20
    t1: int = 10
    finetune_epochs: int = 2
    opt: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3, min_lr=1e-4, weight_decay=0.01))
    init_scale: float = 0.02


def supernet_study_settings() -> StudySettings:
    """Budget for the whole-supernet studies (distribution, transition ablation).

    A smaller peak rate over a longer run; selected on calibration seeds
    disjoint from the ones the checks run on.
    """
    return StudySettings(epochs=30, t1=15, opt=OptimConfig(lr=1e-3, min_lr=1e-3 / 30, weight_decay=0.01))


def _settings_dict(s: StudySettings) -> dict:
    d = asdict(s)
    d["opt"]["betas"] = list(d["opt"]["betas"])
    return d


def _study_hash(name, **parts) -> str:
    blob = json.dumps({"study": name, **parts}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _draw_related(space: SearchSpace, anchor: Architecture, rng: SeededRng, larger: bool,
                  max_tries: int = 10_000) -> Architecture:
    """Uniform draw among architectures that strictly dominate (or are strictly dominated by) ``anchor``."""
    for _ in range(max_tries):
        arch = sample_uniform(space, None, None, rng)
        if arch == anchor:
            continue
        if (anchor.dominated_by(arch) if larger else arch.dominated_by(anchor)):
            return arch
    raise ConfigurationError(f"no architecture {'above' if larger else 'below'} {anchor} in this space")


# ------------------------------------------------------------------- grow/crop
def grow_crop_study(space: SearchSpace, task: SyntheticTask, n_variants: int = 100, seed: int = 0,
                    settings: StudySettings | None = None, small: Architecture | None = None,
                    large: Architecture | None = None, grow_targets=None, crop_targets=None):
    """Train a small and a large subnet standalone; derive variants without retraining.

    Grown variants append freshly initialised weights (same truncated-normal
    scheme as the supernet) to the trained small network; cropped variants
    take the prefix slice of the trained large network. All accuracies are on
    the test split. Returns ``(report, artefacts)`` where the artefacts hold
    the trained networks and variant architectures for follow-up analyses.
    """
    if n_variants < 1:
        raise InputError("n_variants must be >= 1")
    s = settings or StudySettings()
    small = small or space.min_arch
    large = large or space.max_arch
    rng = SeededRng(seed)
    w_small = init_weights(space, rng.child_seed(), s.init_scale, arch=small)
    train_standalone(w_small, small, s.epochs, task.train, s.opt, SeededRng(rng.child_seed()))
    w_large = init_weights(space, rng.child_seed(), s.init_scale, arch=large)
    train_standalone(w_large, large, s.epochs, task.train, s.opt, SeededRng(rng.child_seed()))
    ref_small = evaluate(w_small, small, task.test)[0]
    ref_large = evaluate(w_large, large, task.test)[0]

    grow_targets = list(grow_targets) if grow_targets is not None else [
        _draw_related(space, small, rng, larger=True) for _ in range(n_variants)]
    crop_targets = list(crop_targets) if crop_targets is not None else [
        _draw_related(space, large, rng, larger=False) for _ in range(n_variants)]
    records = [{"kind": "reference_small", "index": -1, "arch": small.encode(), "accuracy": ref_small},
               {"kind": "reference_large", "index": -1, "arch": large.encode(), "accuracy": ref_large}]
    grown, cropped = [], []
    for i, arch in enumerate(grow_targets):
        w = grow(w_small, arch, rng.child_seed(), "random", s.init_scale)
        acc = evaluate(w, arch, task.test)[0]
        grown.append(acc)
        records.append({"kind": "grow", "index": i, "arch": arch.encode(), "accuracy": acc})
    for i, arch in enumerate(crop_targets):
        acc = evaluate(crop(w_large, arch), arch, task.test)[0]
        cropped.append(acc)
        records.append({"kind": "crop", "index": i, "arch": arch.encode(), "accuracy": acc})
    summary = {"grow": summarize(grown), "crop": summarize(cropped),
               "reference_small": ref_small, "reference_large": ref_large,
               "grow_gap": float(np.mean(grown)) - ref_small, "crop_gap": float(np.mean(cropped)) - ref_large}
    h = _study_hash("grow_crop", seed=seed, n=n_variants, task=asdict(task.params),
                    settings=_settings_dict(s), small=small.encode(), large=large.encode(),
                    grow=[a.encode() for a in grow_targets], crop=[a.encode() for a in crop_targets])
    arte = {"small": (small, w_small), "large": (large, w_large),
            "grow_targets": grow_targets, "crop_targets": crop_targets}
    return StudyReport("grow_crop", records, summary, h), arte


# ----------------------------------------------------------- cosine similarity
def token_cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity of corresponding token vectors over the leading shared width."""
    d = min(a.shape[-1], b.shape[-1])
    a = a[..., :d].reshape(-1, d)
    b = b[..., :d].reshape(-1, d)
    num = (a * b).sum(axis=1)
    den = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), eps)
    return np.clip(num / den, -1.0, 1.0)


def cosine_similarity_study(ref_weights: SupernetWeights, ref_arch: Architecture, variant_archs,
                            x: np.ndarray, mode: str, seed: int = 0, init_scale: float = 0.02,
                            name: str = "cossim"):
    """Block-wise similarity between a trained network and its grown/cropped variants.

    ``mode`` is ``"grow"`` (random-init complement) or ``"crop"`` (prefix
    slice). For every block index present in both networks, the cosine
    similarity of each token's post-block feature vector is taken over the
    leading shared feature dimensions; records hold per-variant mean and std
    over all tokens of ``x``, and the summary pools all variants per block.
    """
    if mode not in ("grow", "crop"):
        raise InputError(f"mode must be 'grow' or 'crop', got {mode!r}")
    rng = SeededRng(seed)
    ref_feats = block_features(ref_weights, ref_arch, x)
    per_block: dict = {}
    records = []
    for vi, arch in enumerate(variant_archs):
        if mode == "grow":
            w = grow(ref_weights, arch, rng.child_seed(), "random", init_scale, source=ref_arch)
        else:
            w = crop(ref_weights, arch)
        feats = block_features(w, arch, x)
        shared = min(len(feats), len(ref_feats))
        if shared == 0:
            raise InputError(f"variant {arch} shares no block with {ref_arch}")
        for b in range(shared):
            sims = token_cosine(ref_feats[b], feats[b])
            per_block.setdefault(b, []).append(sims)
            records.append({"mode": mode, "variant": vi, "arch": arch.encode(), "block": b,
                            "mean": float(sims.mean()), "std": float(sims.std())})
    summary = {}
    for b, chunks in sorted(per_block.items()):
        summary[f"block{b}"] = summarize(np.concatenate(chunks))
    summary["final_block"] = max(per_block)
    h = _study_hash(name, mode=mode, seed=seed, ref=ref_arch.encode(),
                    variants=[a.encode() for a in variant_archs],
                    weights=hashlib.sha256(b"".join(p.tobytes() for p in ref_weights.params.values())).hexdigest(),
                    x=hashlib.sha256(x.tobytes()).hexdigest())
    return StudyReport(name, records, summary, h)


# ------------------------------------------------------- accuracy distribution
def sample_feasible(space: SearchSpace, constraint, rng: SeededRng, max_tries: int = 10_000) -> Architecture:
    for _ in range(max_tries):
        arch = sample_uniform(space, None, None, rng)
        if constraint is None or param_count(arch, space) <= constraint:
            return arch
    raise ConfigurationError(f"no architecture within {constraint} parameters after {max_tries} draws")


def accuracy_distribution_study(weights: SupernetWeights, space: SearchSpace, constraint, n_samples: int,
                                valset: Dataset, seed: int = 0, name: str = "dist"):
    """Evaluate ``n_samples`` uniform feasible subnets (drawn with replacement)."""
    if n_samples < 1:
        raise InputError("n_samples must be >= 1")
    if constraint is not None and param_count(space.min_arch, space) > constraint:
        raise ConfigurationError(f"constraint {constraint} admits no architecture")
    rng = SeededRng(seed)
    cache = {}
    records = []
    for i in range(n_samples):
        arch = sample_feasible(space, constraint, rng)
        key = arch.encode()
        if key not in cache:
            cache[key] = evaluate(weights, arch, valset)
        acc, loss = cache[key]
        records.append({"index": i, "arch": key, "params": param_count(arch, space),
                        "accuracy": acc, "loss": loss})
    summary = {"accuracy": summarize(r["accuracy"] for r in records),
               "loss": summarize(r["loss"] for r in records)}
    h = _study_hash(name, seed=seed, n=n_samples, constraint=constraint,
                    weights=hashlib.sha256(b"".join(p.tobytes() for p in weights.params.values())).hexdigest())
    return StudyReport(name, records, summary, h)


# -------------------------------------------------------------- training helpers
def train_supernet(space, partition, task, settings: StudySettings, seed: int, progressive: bool = True):
    """GrowTAS (two or more stages) or uniform-baseline supernet on ``task.train``."""
    rng = SeededRng(seed)
    w = init_weights(space, rng.child_seed(), settings.init_scale)
    train_rng = SeededRng(rng.child_seed())
    if progressive:
        transitions = (0, settings.t1, settings.epochs) if partition.K == 2 else None
        if transitions is None:
            raise ConfigurationError("study helpers build two-stage schedules only")
        train_grow_tas(w, space, partition, Schedule(transitions), task.train, settings.opt, train_rng)
    else:
        train_uniform(w, space, settings.epochs, task.train, settings.opt, train_rng)
    return w


def stage_best_accuracy(weights, space, partition, k, valset) -> float:
    """Best validation accuracy over every member of stage ``k`` (exhaustive)."""
    return max(evaluate(weights, a, valset)[0] for a in enumerate_space(space) if partition.member(a, k))


# ---------------------------------------------------------- transition ablation
def transition_ablation(space, partition, task, t1_values, param_limits, seed: int = 0,
                        settings: StudySettings | None = None, finetune: bool = True,
                        evo: EvoConfig | None = None):
    """One GrowTAS run (plus GrowTAS+ if ``finetune``) per ``T_1``; best searched subnet per limit.

    Records hold validation accuracy of the searched architecture and its test
    accuracy. A ``T_1`` leaving the last stage a single epoch is flagged.
    """
    s = settings or StudySettings()
    evo = evo or EvoConfig()
    for t1 in t1_values:
        if not 0 < t1 < s.epochs:
            raise InputError(f"T_1={t1} must lie strictly inside (0, {s.epochs})")
    records = []
    for t1 in t1_values:
        run = replace(s, t1=t1)
        w = train_supernet(space, partition, task, run, seed, progressive=True)
        variants = [("growtas", w)]
        if finetune:
            wp = w.copy()
            finetune_plus(wp, space, partition, build_freeze_mask(space, partition), task.train,
                          FinetuneConfig(s.finetune_epochs), s.opt, SeededRng(seed + 7))
            variants.append(("growtas_plus", wp))
        for label, weights in variants:
            for limit in param_limits:
                res = search_supernet(weights, space, task.val, replace(evo, constraint=limit, seed=seed))
                best = res.best
                records.append({"model": label, "t1": t1, "param_limit": limit, "arch": best.arch.encode(),
                                "params": best.params, "val_accuracy": best.accuracy,
                                "test_accuracy": evaluate(weights, best.arch, task.test)[0],
                                "flag": "last_stage_one_epoch" if s.epochs - t1 == 1 else ""})
    grid = {}
    for r in records:
        grid.setdefault(r["model"], {}).setdefault(r["param_limit"], {})[r["t1"]] = r["val_accuracy"]
    summary = {"shape": [len(t1_values), len(param_limits)], "grid": grid}
    h = _study_hash("ablate_t1", seed=seed, t1=list(t1_values), limits=list(param_limits),
                    task=asdict(task.params), settings=_settings_dict(s), finetune=finetune, evo=asdict(evo))
    return StudyReport("ablate_t1", records, summary, h)
