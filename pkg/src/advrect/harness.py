"""Command-line experiment orchestration.

Subcommands: train, attack, defend, stats, report. Every failure path
prints a single `advrect: error: ...` line on stderr and exits non-zero.
Outputs under --out: checkpoints, attack dumps with JSON sidecars,
per-sample entropy records, defense reports and traces, and CSV tables.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import attacks as atk
from . import data as datamod
from . import entropy_stats as stats
from . import models as modelsmod
from . import rectifier as rect
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractViolation, FormatError
from .report import EvalReport, render_csv, render_markdown

CHECKPOINT_NAME = "model.ckpt"
RECORDS_NAME = "records.csv"


def _require_path(path, what):
    if not path:
        raise ConfigError(f"{what} is not configured")
    if not os.path.exists(path):
        raise ConfigError(f"{what} does not exist: {path}")
    return path


def dataset_from_config(cfg: ExperimentConfig, which: str) -> datamod.Dataset:
    d = cfg.data
    if d.source == "idx":
        images = _require_path(getattr(d, f"{which}_images"), f"data.{which}_images")
        labels = _require_path(getattr(d, f"{which}_labels"), f"data.{which}_labels")
        return datamod.load_idx(images, labels, split=which)
    if d.source == "blobs":
        count = d.train_size if which == "train" else d.test_size
        return datamod.synth_blobs(
            d.blob_classes, max(1, count // d.blob_classes), d.blob_dim, d.blob_spread,
            seed=cfg.seed * 2 + (1 if which == "train" else 2),
        )
    count = d.train_size if which == "train" else d.test_size
    return datamod.synth_digits(
        count, seed=[cfg.seed, 1 if which == "train" else 2],
        jitter=d.jitter, noise=d.noise, split=which,
    )


def eval_subset(cfg: ExperimentConfig, test: datamod.Dataset) -> datamod.Dataset:
    """Seeded shuffle, first `subset` samples (0 = whole set)."""
    if cfg.subset <= 0 or cfg.subset >= len(test):
        return test
    order = np.random.default_rng([cfg.seed, 7]).permutation(len(test))
    return test.subset(order[: cfg.subset], split=test.split)


def attack_tag(spec: atk.AttackSpec) -> str:
    return spec.kind + ("-T" if spec.targeted else "")


def _resolve_rectifier(cfg: ExperimentConfig, model, train_ds) -> rect.RectifierConfig:
    """Fill auto (zero) thresholds from clean training statistics."""
    r = cfg.rectifier
    if r.aux_threshold > 0 and r.ent_threshold > 0:
        return r
    calib = train_ds.images[: cfg.defense.calibration_size]
    aux_t, ent_t = rect.calibrate_thresholds(
        model, calib,
        multipliers=(cfg.defense.aux_multiplier, cfg.defense.ent_multiplier),
        normalized=r.ent_threshold_normalized,
    )
    return dataclasses.replace(
        r,
        aux_threshold=aux_t if r.aux_threshold <= 0 else r.aux_threshold,
        ent_threshold=ent_t if r.ent_threshold <= 0 else r.ent_threshold,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: ExperimentConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    train = dataset_from_config(cfg, "train")
    test = dataset_from_config(cfg, "test")
    t0 = time.monotonic()
    model = modelsmod.train_joint(
        train, cfg.arch, cfg.train,
        progress=lambda e, l: print(f"epoch {e}: loss {l:.4f}"),
    )
    path = os.path.join(cfg.out, CHECKPOINT_NAME)
    modelsmod.save_checkpoint(model, path)
    acc = float((modelsmod.predict_labels(model, test.images) == test.labels).mean())
    print(f"trained in {time.monotonic() - t0:.1f}s, checkpoint: {path}")
    print(f"clean accuracy: {acc:.4f}")
    return 0


def _rectifier_fn_for_bpda(model, rcfg):
    return rect.snapshot_fn(model, rcfg)


def cmd_attack(cfg: ExperimentConfig, checkpoint: str) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    model = modelsmod.load_checkpoint(_require_path(checkpoint, "checkpoint"))
    test = eval_subset(cfg, dataset_from_config(cfg, "test"))
    x, y = test.images, test.labels
    records = stats.collect_records(model, x, y, tag="clean")
    needs_rect = any(s.kind in ("ADAPTIVE", "BPDA") for s in cfg.attacks)
    rcfg = None
    if needs_rect:
        rcfg = _resolve_rectifier(cfg, model, dataset_from_config(cfg, "train"))
    seen = {}
    for spec in cfg.attacks:
        tag = attack_tag(spec)
        if tag in seen:
            seen[tag] += 1
            tag = f"{tag}@{seen[tag]}"
        else:
            seen[tag] = 0
        t0 = time.monotonic()
        batch = atk.run_attack(
            model, x, y, spec, rect_cfg=rcfg,
            rectifier_fn=_rectifier_fn_for_bpda(model, rcfg) if spec.kind == "BPDA" else None,
        )
        acc = float((modelsmod.predict_labels(model, batch.x_adv) == y).mean())
        dump = os.path.join(cfg.out, f"attack_{tag}.dump")
        atk.save_attack_dump(batch, dump, num_classes=test.num_classes, tag=tag)
        records += stats.collect_records(model, batch.x_adv, y, tag=tag)
        print(f"{tag}: undefended accuracy {acc:.4f} "
              f"(success {batch.success_rate:.4f}, {time.monotonic() - t0:.1f}s) -> {dump}")
    rec_path = os.path.join(cfg.out, RECORDS_NAME)
    stats.write_records_csv(records, rec_path)
    print(f"records: {rec_path}")
    return 0


def _defend_batch(model, x, cfg: ExperimentConfig, rcfg) -> tuple:
    """Returns (defended labels, traces-or-None)."""
    variant = cfg.defense.variant
    if variant == "none":
        return modelsmod.predict_labels(model, x), None
    if variant == "aux_only":
        x_p = rect.aux_only_purify(model, x, cfg.defense.aux_only_steps,
                                   rcfg.step_size, rcfg.eps_pfy)
        return modelsmod.predict_labels(model, x_p), None
    out = _rectify_parallel(model, x, rcfg, cfg.workers)
    return out.labels, out.traces


def _rectify_parallel(model, x, rcfg, workers: int):
    if workers <= 1 or len(x) < 2 * workers:
        return rect.rectify(model, x, rcfg)
    import multiprocessing as mp

    chunks = np.array_split(np.arange(len(x)), workers)
    args = [(model, x[c], rcfg) for c in chunks if len(c)]
    with mp.get_context("fork").Pool(processes=workers) as pool:
        parts = pool.starmap(rect.rectify, args)
    x_pfy = np.concatenate([p.x_pfy for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    rounds = np.concatenate([p.rounds_used for p in parts])
    traces = []
    offset = 0
    for p in parts:
        for t in p.traces:
            t.sample_id += offset
            traces.append(t)
        offset += len(p.x_pfy)
    return rect.PurifiedBatch(x_pfy=x_pfy, traces=traces, labels=labels,
                              rounds_used=rounds)


def cmd_defend(cfg: ExperimentConfig, checkpoint: str, dumps: list) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    model = modelsmod.load_checkpoint(_require_path(checkpoint, "checkpoint"))
    if model.arch.aux_kind != cfg.rectifier.aux_kind:
        raise ConfigError(
            f"checkpoint aux kind {model.arch.aux_kind} does not match "
            f"rectifier.aux_kind {cfg.rectifier.aux_kind}"
        )
    train_ds = dataset_from_config(cfg, "train")
    rcfg = _resolve_rectifier(cfg, model, train_ds)
    test = eval_subset(cfg, dataset_from_config(cfg, "test"))
    wall = {}

    t0 = time.monotonic()
    nat_undef = float((modelsmod.predict_labels(model, test.images) == test.labels).mean())
    nat_labels, nat_traces = _defend_batch(model, test.images, cfg, rcfg)
    nat_acc = float((nat_labels == test.labels).mean())
    detection = {"clean": _detection_counts(model, test.images, rcfg)}
    wall["natural"] = time.monotonic() - t0

    attack_acc, attack_undef = {}, {}
    mean_entropy, mean_aux = {}, {}
    for dump in dumps:
        ds, spec, side = atk.load_attack_dump(dump)
        tag = side.get("tag") or attack_tag(spec)
        t0 = time.monotonic()
        x_adv, y = ds.images, ds.labels
        attack_undef[tag] = float((modelsmod.predict_labels(model, x_adv) == y).mean())
        labels, traces = _defend_batch(model, x_adv, cfg, rcfg)
        attack_acc[tag] = float((labels == y).mean())
        probs = modelsmod.predict(model, x_adv)
        mean_entropy[tag] = float(stats.normalized_entropy(probs).mean())
        mean_aux[tag] = float(modelsmod.aux_loss_rows(model, x_adv).mean())
        detection[tag] = _detection_counts(model, x_adv, rcfg)
        if traces is not None:
            rect.dump_traces(traces, os.path.join(cfg.out, f"traces_{tag}.jsonl"))
        wall[tag] = time.monotonic() - t0
        print(f"{tag}: undefended {attack_undef[tag]:.4f} -> defended {attack_acc[tag]:.4f}")

    report = EvalReport(
        variant=cfg.defense.variant,
        natural_acc=nat_acc,
        natural_acc_undefended=nat_undef,
        attack_acc=attack_acc,
        attack_acc_undefended=attack_undef,
        mean_entropy=mean_entropy,
        mean_aux=mean_aux,
        detection=detection,
        wall_clock=wall,
    )
    path = os.path.join(cfg.out, f"report_{cfg.defense.variant}.json")
    report.save(path)
    print(f"natural: undefended {nat_undef:.4f} -> defended {nat_acc:.4f}")
    if attack_acc:
        print(f"worst-case accuracy: {report.worst:.4f}")
    print(f"report: {path}")
    return 0


def _detection_counts(model, x, rcfg) -> dict:
    if not rcfg.detection_enabled:
        return {"clean": 0, "suspect": 0, "disabled": True}
    clean = rect.detect(model, x, rcfg)
    return {"clean": int(clean.sum()), "suspect": int((~clean).sum())}


def cmd_stats(records_path: str, out: str) -> int:
    os.makedirs(out, exist_ok=True)
    records = stats.read_records_csv(_require_path(records_path, "records file"))
    if not records:
        raise ConfigError("records file is empty")
    by_tag = {}
    for r in records:
        by_tag.setdefault(r.tag, []).append(r)
    curves = {tag: stats.bin_error_curve(rs, bins=10) for tag, rs in by_tag.items()}
    stats.write_error_curve_csv(curves, os.path.join(out, "entropy_error_curve.csv"))

    adv_records = [r for r in records if r.tag != "clean"]
    points = stats.points_from_records(adv_records) if adv_records else []
    rho = None
    if len(points) >= 3:
        rho = stats.attack_correlation(points)
    stats.write_attack_points_csv(points, os.path.join(out, "attack_points.csv"), rho=rho)
    if rho is None:
        print("attack correlation skipped: needs >= 3 attack configurations")
    else:
        print(f"attack correlation rho = {rho:.4f}")

    stats.joint_distribution_dump(records, os.path.join(out, "joint_distribution.csv"))
    print(f"stats written to {out}")
    return 0


def cmd_report(report_paths: list, out: str) -> int:
    os.makedirs(out, exist_ok=True)
    reports = [EvalReport.load(_require_path(p, "report file")) for p in report_paths]
    csv_text = render_csv(reports)
    md_text = render_markdown(reports)
    with open(os.path.join(out, "table.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(os.path.join(out, "table.md"), "w", encoding="utf-8") as fh:
        fh.write(md_text)
    print(md_text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "subset", None) is not None:
        cfg.subset = args.subset
    return cfg


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--subset", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advrect",
                                description="test-time adversarial rectification pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a joint classifier + auxiliary model")
    _add_common(sp)

    sp = sub.add_parser("attack", help="generate adversarial dumps per configured attack")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("defend", help="run the defense over attack dumps")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dumps", nargs="*", default=[])

    sp = sub.add_parser("stats", help="aggregate per-sample records into CSV artifacts")
    sp.add_argument("--records", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("report", help="merge defense reports into accuracy tables")
    sp.add_argument("--reports", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "stats":
            return cmd_stats(args.records, args.out)
        if args.command == "report":
            return cmd_report(args.reports, args.out)
        cfg = _apply_overrides(load_config(_require_path(args.config, "config file")), args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "attack":
            return cmd_attack(cfg, args.checkpoint)
        if args.command == "defend":
            return cmd_defend(cfg, args.checkpoint, args.dumps)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractViolation, FormatError, FileNotFoundError) as exc:
        print(f"advrect: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
