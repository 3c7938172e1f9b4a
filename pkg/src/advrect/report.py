"""Evaluation reports and table rendering.

A defend run produces one EvalReport per defense variant; the report
command merges several into a fixed-column accuracy matrix
(Natural, FGSM, PGD, FGSM-T, PGD-T, CW, DF, Worst). The worst-case column
is always the minimum over the evaluated attacks, natural excluded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .errors import ContractViolation

TABLE_COLUMNS = ("Natural", "FGSM", "PGD", "FGSM-T", "PGD-T", "CW", "DF")
TABLE_FOOTNOTE = "AA column omitted: the AutoAttack suite is out of scope for this artifact."


def _fmt(v: float) -> str:
    return f"{100.0 * v:.2f}"


@dataclass
class EvalReport:
    variant: str
    natural_acc: float
    natural_acc_undefended: float
    attack_acc: dict           # tag -> defended accuracy
    attack_acc_undefended: dict
    worst: float = None
    mean_entropy: dict = field(default_factory=dict)  # tag -> mean v_ent of the adv batch
    mean_aux: dict = field(default_factory=dict)
    detection: dict = field(default_factory=dict)     # tag -> {"clean": n, "suspect": n}
    wall_clock: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.attack_acc:
            expected = min(self.attack_acc.values())
            if self.worst is None:
                self.worst = expected
            elif abs(self.worst - expected) > 1e-9:
                raise ContractViolation("worst-case accuracy must equal the attack minimum")
        elif self.worst is None:
            self.worst = self.natural_acc

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _check_consistent(reports):
    if not reports:
        raise ContractViolation("no reports to merge")
    tags = set(reports[0].attack_acc)
    for r in reports[1:]:
        if set(r.attack_acc) != tags:
            raise ContractViolation(
                f"inconsistent attack columns: {sorted(tags)} vs {sorted(r.attack_acc)}"
            )
    return tags


def render_csv(reports) -> str:
    """Accuracy matrix as CSV, columns fixed and documented."""
    tags = _check_consistent(reports)
    cols = [c for c in TABLE_COLUMNS[1:] if c in tags]
    header = ["variant", "Natural"] + cols + ["Worst"]
    lines = [",".join(header)]
    for r in reports:
        row = [r.variant, _fmt(r.natural_acc)] + [_fmt(r.attack_acc[c]) for c in cols] + [_fmt(r.worst)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def render_markdown(reports) -> str:
    tags = _check_consistent(reports)
    cols = [c for c in TABLE_COLUMNS[1:] if c in tags]
    extra = sorted(tags - set(cols))
    header = ["Variant", "Natural"] + cols + ["Worst"]
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for r in reports:
        row = [r.variant, _fmt(r.natural_acc)] + [_fmt(r.attack_acc[c]) for c in cols] + [_fmt(r.worst)]
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append(TABLE_FOOTNOTE)
    if extra:
        lines.append(f"Attacks evaluated but outside the fixed columns (still in Worst): {', '.join(extra)}.")
    return "\n".join(lines) + "\n"
