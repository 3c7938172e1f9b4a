"""Prediction-entropy measurement and aggregation.

Collects per-sample records of prediction entropy, classification loss and
auxiliary loss, and aggregates them into the three artifacts used to study
the low-entropy behaviour of attacked inputs: the entropy-vs-error-rate
curve, the per-attack (mean loss, mean entropy) point cloud with its
Pearson correlation, and the joint auxiliary-loss/entropy distribution.

CSV columns are fixed: tag, aux_loss, entropy (raw bits), loss
(classification), v_ent (normalized entropy), correct (0/1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ContractViolation, UndefinedCorrelation

RECORD_FIELDS = ("tag", "aux_loss", "entropy", "loss", "v_ent", "correct")


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def normalized_entropy(probs: np.ndarray) -> np.ndarray:
    """Per-sample H / log2(N) over [B,N] probability rows, clipped to [0,1]."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ContractViolation("normalized entropy needs [B,N] rows with N >= 2")
    h = dc.entropy_rows_np(probs)
    return np.clip(h / np.log2(probs.shape[1]), 0.0, 1.0)


@dataclass
class EntropyRecord:
    sample_id: int
    predicted: int
    label: int
    entropy_bits: float
    v_ent: float
    cls_loss: float
    aux_loss: float
    tag: str

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


def records_from_probs(probs: np.ndarray, labels: np.ndarray, aux_rows: np.ndarray,
                       tag: str, start_id: int = 0) -> list:
    """Build per-sample records from model outputs."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    h = dc.entropy_rows_np(probs)
    v = normalized_entropy(probs)
    loss = dc.cross_entropy_rows_np(probs, labels)
    pred = probs.argmax(axis=1)
    return [
        EntropyRecord(
            sample_id=start_id + i,
            predicted=int(pred[i]),
            label=int(labels[i]),
            entropy_bits=float(h[i]),
            v_ent=float(v[i]),
            cls_loss=float(loss[i]),
            aux_loss=float(aux_rows[i]),
            tag=tag,
        )
        for i in range(len(labels))
    ]


def collect_records(model, images: np.ndarray, labels: np.ndarray, tag: str,
                    start_id: int = 0) -> list:
    from . import models as modelsmod  # local import keeps module deps one-way

    probs = modelsmod.predict(model, images)
    aux = modelsmod.aux_loss_rows(model, images)
    return records_from_probs(probs, labels, aux, tag, start_id)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class BinnedErrorCurve:
    edges: np.ndarray           # bins+1 edges over [0,1]
    counts: np.ndarray          # per-bin sample count
    error_rate: list            # per-bin float, or None where the bin is empty

    def __post_init__(self):
        for r in self.error_rate:
            if r is not None and not 0.0 <= r <= 1.0:
                raise ContractViolation("error rate outside [0,1]")


def bin_error_curve(records, bins: int) -> BinnedErrorCurve:
    """Equal-width bins over v_ent in [0,1]; error rate = misclassified/total."""
    if bins < 1:
        raise ContractViolation("bins must be >= 1")
    records = list(records)
    if not records:
        raise ContractViolation("no records to bin")
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = np.zeros(bins, dtype=np.int64)
    errors = np.zeros(bins, dtype=np.int64)
    for r in records:
        b = min(int(r.v_ent * bins), bins - 1)
        counts[b] += 1
        errors[b] += 0 if r.correct else 1
    rate = [float(errors[i]) / counts[i] if counts[i] else None for i in range(bins)]
    return BinnedErrorCurve(edges=edges, counts=counts, error_rate=rate)


@dataclass
class AttackPoint:
    tag: str
    mean_loss: float
    mean_entropy: float  # raw bits


@dataclass
class AttackPointCloud:
    points: list
    rho: float


def points_from_records(records) -> list:
    """Batch means per attack tag, sorted by tag for determinism."""
    groups = {}
    for r in records:
        groups.setdefault(r.tag, []).append(r)
    points = []
    for tag in sorted(groups):
        g = groups[tag]
        points.append(AttackPoint(
            tag=tag,
            mean_loss=float(np.mean([r.cls_loss for r in g])),
            mean_entropy=float(np.mean([r.entropy_bits for r in g])),
        ))
    return points


def attack_correlation(points) -> float:
    """Pearson correlation of (mean loss, mean entropy) across attack
    configurations."""
    points = list(points)
    if len(points) < 3:
        raise ContractViolation("correlation needs at least 3 attack points")
    x = np.array([p.mean_loss for p in points], dtype=np.float64)
    y = np.array([p.mean_entropy for p in points], dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    vx, vy = (xc * xc).sum(), (yc * yc).sum()
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelation("zero variance in loss or entropy coordinate")
    rho = float((xc * yc).sum() / np.sqrt(vx * vy))
    return max(-1.0, min(1.0, rho))


def cloud_from_records(records) -> AttackPointCloud:
    points = points_from_records(records)
    return AttackPointCloud(points=points, rho=attack_correlation(points))


# ---------------------------------------------------------------------------
# CSV artifacts


def write_records_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.tag, _fmt(r.aux_loss), _fmt(r.entropy_bits),
                        _fmt(r.cls_loss), _fmt(r.v_ent), int(r.correct)])


def read_records_csv(path) -> list:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ContractViolation(f"unexpected record CSV header in {path}")
        for i, row in enumerate(reader):
            correct = int(row["correct"])
            records.append(EntropyRecord(
                sample_id=i,
                predicted=0 if correct else 1,  # only correctness survives the round trip
                label=0,
                entropy_bits=float(row["entropy"]),
                v_ent=float(row["v_ent"]),
                cls_loss=float(row["loss"]),
                aux_loss=float(row["aux_loss"]),
                tag=row["tag"],
            ))
    return records


def joint_distribution_dump(records, path):
    """Per-tag batch means of (aux loss, entropy), one CSV row per tag."""
    records = list(records)
    if not records:
        raise ContractViolation("no records to dump")
    groups = {}
    for r in records:
        groups.setdefault(r.tag, []).append(r)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "aux_loss", "entropy"])
        for tag in sorted(groups):
            g = groups[tag]
            w.writerow([tag,
                        _fmt(float(np.mean([r.aux_loss for r in g]))),
                        _fmt(float(np.mean([r.entropy_bits for r in g])))])


def write_error_curve_csv(curves: dict, path):
    """curves: tag -> BinnedErrorCurve."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "bin_lo", "bin_hi", "count", "error_rate"])
        for tag in sorted(curves):
            c = curves[tag]
            for i in range(len(c.counts)):
                rate = "" if c.error_rate[i] is None else _fmt(c.error_rate[i])
                w.writerow([tag, _fmt(c.edges[i]), _fmt(c.edges[i + 1]), int(c.counts[i]), rate])


def write_attack_points_csv(points, path, rho=None):
    """Fig.2-style points; the final line is a machine-parsable rho footer
    (empty value when fewer than 3 points exist)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tag", "mean_loss", "mean_entropy"])
        for p in points:
            w.writerow([p.tag, _fmt(p.mean_loss), _fmt(p.mean_entropy)])
        w.writerow(["rho", "" if rho is None else _fmt(rho), ""])
