"""Command-line entry point.

Exit codes: 0 success, 1 other package error, 2 usage error, 3 invalid
configuration (including checkpoint/config hash mismatch), 4 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, export_dataset, import_dataset
from .errors import ConfigurationError, GrowTASError, NumericError
from .evo import search_supernet
from .experiments import (StudySettings, accuracy_distribution_study, cosine_similarity_study,
                          generate_task, grow_crop_study, stage_best_accuracy, train_supernet,
                          transition_ablation)
from .rng import SeededRng
from .scheduler import (TrainingAborted, build_freeze_mask, finetune_plus, log_to_csv, train_grow_tas,
                        train_uniform)
from .space import Architecture, enumerate_space, param_count
from .supernet import evaluate, init_weights

log = logging.getLogger("growtas")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3, 4


# ------------------------------------------------------------------ helpers
def _config(args):
    if args.config is None:
        return config_mod.from_dict({}, seed=args.seed, output_dir=args.out)
    return config_mod.load_config(args.config, seed=args.seed, output_dir=args.out)


def _splits(cfg):
    prefix = cfg.raw["task"]["dataset"]
    if prefix is None:
        task = generate_task(cfg.task)
        return task.train, task.val, task.test
    sets = tuple(import_dataset(f"{prefix}.{name}.bin") for name in ("train", "val", "test"))
    for ds in sets:
        if (ds.seq_len, ds.input_dim, ds.num_classes) != (cfg.task.seq_len, cfg.task.input_dim, cfg.task.num_classes):
            raise ConfigurationError(f"task: imported dataset {prefix} does not match task.seq_len/input_dim/num_classes")
    return sets


class _Task:
    def __init__(self, params, train, val, test):
        self.params, self.train, self.val, self.test = params, train, val, test


def _out(cfg) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args, cfg):
    return load_checkpoint(args.checkpoint, cfg.hash, allow_mismatch=args.allow_config_mismatch)


def _settings(cfg) -> StudySettings:
    return StudySettings(epochs=cfg.schedule.total_epochs,
                         t1=cfg.schedule.transitions[1] if cfg.schedule.K >= 2 else cfg.schedule.total_epochs // 2,
                         finetune_epochs=cfg.finetune.epochs, opt=cfg.optimizer,
                         init_scale=float(cfg.raw["init_scale"]))


# ----------------------------------------------------------------- commands
def cmd_enumerate(args, cfg):
    archs = list(enumerate_space(cfg.space))
    limit = cfg.evo.constraint
    counts = sorted((param_count(a, cfg.space), a.encode()) for a in archs)
    feasible = [c for c in counts if limit is None or c[0] <= limit]
    print(f"architectures: {len(archs)}")
    print(f"feasible: {len(feasible)}" + (f" (constraint {limit})" if limit is not None else ""))
    if feasible:
        print(f"min params: {feasible[0][0]} {feasible[0][1]}")
        print(f"max params: {feasible[-1][0]} {feasible[-1][1]}")
    return EXIT_OK


def cmd_train(args, cfg):
    train, _, _ = _splits(cfg)
    out = _out(cfg)
    ckpt_path = out / f"supernet_{cfg.hash}.gtas"
    log_path = out / f"train_log_{cfg.hash}.csv"
    if args.resume:
        ck = load_checkpoint(args.resume, cfg.hash, allow_mismatch=args.allow_config_mismatch)
        weights, rng = ck.weights, SeededRng.from_state(ck.rng_seed, ck.rng_state)
        start = ck.epoch
    else:
        weights = init_weights(cfg.space, cfg.seed, float(cfg.raw["init_scale"]))
        rng = SeededRng(cfg.seed + 1)
        start = 0
        log_path.write_text("")

    def checkpoint(t, w, r):
        save_checkpoint(ckpt_path, Checkpoint(w, cfg.hash, r.seed, r.get_state(),
                                              {"phase": "train", "baseline": bool(args.baseline)}))

    try:
        if args.baseline:
            records = train_uniform(weights, cfg.space, cfg.schedule.total_epochs if args.stop_epoch is None
                                    else args.stop_epoch, train, cfg.optimizer, rng, start, checkpoint)
        else:
            records = train_grow_tas(weights, cfg.space, cfg.partition, cfg.schedule, train, cfg.optimizer, rng,
                                     start, args.stop_epoch, checkpoint)
    except TrainingAborted as exc:
        bad = out / f"supernet_{cfg.hash}_aborted.gtas"
        r = SeededRng.from_state(rng.seed, exc.rng_state)
        save_checkpoint(bad, Checkpoint(exc.last_good, cfg.hash, r.seed, r.get_state(), {"phase": "aborted"}))
        print(f"numeric abort: {exc}; last good epoch saved to {bad}", file=sys.stderr)
        return EXIT_NUMERIC
    text = log_to_csv(records)
    with open(log_path, "a") as f:
        f.write(text if log_path.stat().st_size == 0 else text.split("\n", 1)[1])
    if not records and not ckpt_path.exists():
        checkpoint(start, weights, rng)
    print(f"trained to epoch {weights.epoch}; checkpoint {ckpt_path}; log {log_path}")
    return EXIT_OK


def cmd_finetune(args, cfg):
    train, _, _ = _splits(cfg)
    ck = _load(args, cfg)
    out = _out(cfg)
    weights = ck.weights
    mask = build_freeze_mask(cfg.space, cfg.partition)
    rng = SeededRng(cfg.seed + 2)
    records = finetune_plus(weights, cfg.space, cfg.partition, mask, train, cfg.finetune, cfg.optimizer, rng)
    path = out / f"supernet_plus_{cfg.hash}.gtas"
    save_checkpoint(path, Checkpoint(weights, cfg.hash, rng.seed, rng.get_state(), {"phase": "finetune_plus"}))
    (out / f"finetune_log_{cfg.hash}.csv").write_text(log_to_csv(records))
    print(f"fine-tuned {len(records)} steps; checkpoint {path}")
    return EXIT_OK


def cmd_search(args, cfg):
    _, val, test = _splits(cfg)
    ck = _load(args, cfg)
    evo = cfg.evo
    if args.constraint is not None:
        evo.constraint = args.constraint
    res = search_supernet(ck.weights, cfg.space, val, evo)
    path = _out(cfg) / f"search_{cfg.hash}.csv"
    path.write_text(res.history_csv())
    b = res.best
    print(f"generations: {len(res.best_per_generation)} population: {evo.population_size} "
          f"evaluations: {res.evaluations}")
    print(f"best: {b.arch.encode()} params={b.params} val_acc={b.accuracy!r} val_loss={b.loss!r} "
          f"test_acc={evaluate(ck.weights, b.arch, test)[0]!r}")
    print(f"history: {path}")
    return EXIT_OK


def cmd_eval(args, cfg):
    train, val, test = _splits(cfg)
    ck = _load(args, cfg)
    arch = Architecture.decode(args.arch) if args.arch else cfg.space.max_arch
    cfg.space.validate(arch)
    ds = {"train": train, "val": val, "test": test}[args.split]
    acc, loss = evaluate(ck.weights, arch, ds)
    print(f"{arch.encode()} {args.split}: accuracy={acc!r} loss={loss!r} params={param_count(arch, cfg.space)}")
    return EXIT_OK


def cmd_study(args, cfg):
    train, val, test = _splits(cfg)
    task = _Task(cfg.task, train, val, test)
    st = cfg.raw["studies"]
    settings = _settings(cfg)
    out = _out(cfg)
    reports = []
    if args.study in ("grow-crop", "cossim"):
        rep, arte = grow_crop_study(cfg.space, task, int(st["n_variants"]), cfg.seed, settings)
        if args.study == "grow-crop":
            reports.append(rep)
        else:
            x = val.x[:64]
            small, w_small = arte["small"]
            large, w_large = arte["large"]
            reports.append(cosine_similarity_study(w_small, small, arte["grow_targets"], x, "grow", cfg.seed,
                                                   settings.init_scale, name="cossim_grow"))
            reports.append(cosine_similarity_study(w_large, large, arte["crop_targets"], x, "crop", cfg.seed,
                                                   name="cossim_crop"))
    elif args.study == "dist":
        if args.checkpoint:
            pairs = [("dist", _load(args, cfg).weights)]
        else:
            pairs = [("dist_growtas", train_supernet(cfg.space, cfg.partition, task, settings, cfg.seed, True)),
                     ("dist_uniform", train_supernet(cfg.space, cfg.partition, task, settings, cfg.seed, False))]
        for name, w in pairs:
            rep = accuracy_distribution_study(w, cfg.space, st["dist_constraint"], int(st["n_samples"]), val,
                                              cfg.seed, name=name)
            rep.summary["stage1_best"] = stage_best_accuracy(w, cfg.space, cfg.partition, 1, val)
            reports.append(rep)
    elif args.study == "ablate-t1":
        reports.append(transition_ablation(cfg.space, cfg.partition, task, list(st["t1_values"]),
                                           list(st["param_limits"]) or [cfg.evo.constraint], cfg.seed, settings,
                                           bool(st["finetune"]), cfg.evo))
    for rep in reports:
        rep.config_hash = cfg.hash
        path = rep.write(out)
        print(rep.summary_text(), end="")
        print(f"records: {path}")
    return EXIT_OK


def cmd_inspect(args, cfg_or_none):
    ck = load_checkpoint(args.path)
    w = ck.weights
    print(f"checkpoint: {args.path}")
    print(f"config hash: {ck.config_hash}")
    print(f"epoch: {w.epoch}")
    print(f"store architecture: {w.shape_arch.encode()} head_dim={w.head_dim} input_dim={w.input_dim} "
          f"classes={w.num_classes}")
    print(f"tensors: {len(w.params)} values: {sum(p.size for p in w.params.values())}")
    print(f"rng: {'seed ' + str(ck.rng_seed) if ck.rng_state else 'absent'}")
    print(f"extra: {ck.extra}")
    print("checksum: ok")
    if cfg_or_none is not None:
        if ck.config_hash != cfg_or_none.hash:
            print(f"config hash mismatch: checkpoint {ck.config_hash} vs config {cfg_or_none.hash}", file=sys.stderr)
            return EXIT_CONFIG
        print("config hash: matches")
    return EXIT_OK


def cmd_make_dataset(args, cfg):
    task = generate_task(cfg.task)
    prefix = Path(args.prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for name, ds in (("train", task.train), ("val", task.val), ("test", task.test)):
        export_dataset(ds, f"{prefix}.{name}.bin")
        print(f"wrote {prefix}.{name}.bin ({len(ds)} records)")
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--allow-config-mismatch", action="store_true",
                        help="accept checkpoints written under a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="growtas", description="Progressive transformer architecture search lab")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("enumerate", parents=[common], help="count architectures and parameter range")
    t = sub.add_parser("train", parents=[common], help="train the supernet (progressive or --baseline)")
    t.add_argument("--baseline", action="store_true", help="uniform sampling over the whole space")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-epoch", type=int, help="stop before this epoch (checkpoint is kept)")
    f = sub.add_parser("finetune-plus", parents=[common], help="restricted fine-tuning with A_1 frozen")
    f.add_argument("--checkpoint", required=True)
    s = sub.add_parser("search", parents=[common], help="constrained evolutionary search")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--constraint", type=int, help="maximum parameter count")
    e = sub.add_parser("eval", parents=[common], help="evaluate one subnet")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--arch", help="architecture encoding, e.g. e16-d2-r2,2-h2,2 (default: largest)")
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    st = sub.add_parser("study", parents=[common], help="diagnostic studies")
    st.add_argument("study", choices=("grow-crop", "cossim", "dist", "ablate-t1"))
    st.add_argument("--checkpoint", help="(dist) evaluate this supernet instead of training both")
    i = sub.add_parser("inspect-checkpoint", parents=[common], help="verify and describe a checkpoint")
    i.add_argument("path")
    m = sub.add_parser("make-dataset", parents=[common], help="export the synthetic task as flat record files")
    m.add_argument("prefix", help="writes <prefix>.train.bin, .val.bin, .test.bin")
    return p


COMMANDS = {"enumerate": cmd_enumerate, "train": cmd_train, "finetune-plus": cmd_finetune,
            "search": cmd_search, "eval": cmd_eval, "study": cmd_study, "make-dataset": cmd_make_dataset}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect-checkpoint":
            cfg = _config(args) if args.config else None
            return cmd_inspect(args, cfg)
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GrowTASError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
