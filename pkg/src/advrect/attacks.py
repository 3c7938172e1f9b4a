"""Gradient-based adversarial example generation.

All attacks are pure functions of (model, batch, spec): a fixed spec.seed
gives bit-identical outputs. L-inf attacks project onto the epsilon ball
around the original batch and clip to [0,1] after every step; L2 attacks
(CW, DeepFool) rescale their final perturbation to the budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from . import data as datamod
from . import models as modelsmod
from .errors import ContractViolation

LINF_KINDS = ("FGSM", "PGD", "BIM", "MIM", "ADAPTIVE", "BPDA")
L2_KINDS = ("CW", "DF")
ATTACK_KINDS = LINF_KINDS + L2_KINDS


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    epsilon: float = 0.3
    norm: str = ""  # defaults to Linf or L2 by kind
    steps: int = 1
    step_size: float = 0.01
    targeted: bool = False
    sigma: float = 0.0        # ADAPTIVE entropy trade-off
    momentum: float = 1.0     # MIM decay
    cw_c: float = 1.0
    cw_lr: float = 0.01
    df_overshoot: float = 0.02
    random_start: bool = True  # PGD-style random init inside the ball
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractViolation(f"unknown attack kind {self.kind!r}; valid: {ATTACK_KINDS}")
        expected = "Linf" if self.kind in LINF_KINDS else "L2"
        norm = self.norm or expected
        if norm != expected:
            raise ContractViolation(f"{self.kind} uses {expected}, got {norm}")
        object.__setattr__(self, "norm", norm)
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be >= 0")
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.kind in ("PGD", "BIM", "MIM", "ADAPTIVE", "BPDA") and self.step_size <= 0:
            raise ContractViolation("step_size must be > 0 for iterative attacks")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class AdvBatch:
    x: np.ndarray
    x_adv: np.ndarray
    y_true: np.ndarray
    success: np.ndarray
    spec: AttackSpec
    y_target: np.ndarray | None = None

    def __post_init__(self):
        if self.x_adv.min() < 0.0 or self.x_adv.max() > 1.0:
            raise ContractViolation("adversarial batch leaves [0,1]")
        d = perturbation_norms(self.x, self.x_adv, self.spec.norm)
        if d.max() > self.spec.epsilon + 1e-6:
            raise ContractViolation(
                f"budget exceeded: {self.spec.norm} norm {d.max():.6g} > {self.spec.epsilon}"
            )

    @property
    def success_rate(self) -> float:
        return float(self.success.mean())


def perturbation_norms(x, x_adv, norm: str) -> np.ndarray:
    d = (x_adv.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1)
    if norm == "Linf":
        return np.abs(d).max(axis=1) if d.size else np.zeros(len(x))
    return np.sqrt((d * d).sum(axis=1))


def pick_targets(y: np.ndarray, num_classes: int, rng) -> np.ndarray:
    """Uniformly random target class != true label."""
    shift = rng.integers(1, num_classes, size=len(y))
    return (np.asarray(y) + shift) % num_classes


def _project_clip(x0: np.ndarray, x_new: np.ndarray, eps: float) -> np.ndarray:
    d = np.clip(x_new.astype(np.float64) - x0.astype(np.float64), -eps, eps)
    return np.clip(x0.astype(np.float64) + d, 0.0, 1.0).astype(np.float32)


def _cls_input_grad(model, x: np.ndarray, labels) -> np.ndarray:
    x_node = dc.Tensor(x)
    loss = modelsmod.cls_loss_graph(model, x_node, labels)
    return dc.gradients(loss, [x_node])[0]


def _finish(model, x, x_adv, y, spec, targets=None) -> AdvBatch:
    pred = modelsmod.predict_labels(model, x_adv)
    success = (pred == targets) if spec.targeted else (pred != np.asarray(y))
    return AdvBatch(x=np.asarray(x, dtype=np.float32), x_adv=x_adv, y_true=np.asarray(y),
                    success=success, spec=spec, y_target=targets)


def _attack_labels(model, y, spec, rng):
    if spec.targeted:
        return pick_targets(np.asarray(y), model.arch.num_classes, rng)
    return None


def fgsm(model, x, y, spec: AttackSpec) -> AdvBatch:
    """Single sign-gradient step; the targeted variant descends on the
    target-label loss instead."""
    if spec.kind != "FGSM":
        raise ContractViolation("spec.kind must be FGSM")
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(spec.seed)
    targets = _attack_labels(model, y, spec, rng)
    g = _cls_input_grad(model, x, targets if spec.targeted else y)
    direction = -np.sign(g) if spec.targeted else np.sign(g)
    x_adv = _project_clip(x, x + spec.epsilon * direction, spec.epsilon)
    return _finish(model, x, x_adv, y, spec, targets)


def _iterative_linf(model, x, y, spec, random_start: bool, momentum: float | None):
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(spec.seed)
    targets = _attack_labels(model, y, spec, rng)
    loss_labels = targets if spec.targeted else y
    sign_dir = -1.0 if spec.targeted else 1.0
    if random_start:
        x_adv = _project_clip(x, x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), spec.epsilon)
    else:
        x_adv = x.copy()
    buf = np.zeros(x.shape, dtype=np.float64)
    for _ in range(spec.steps):
        g = _cls_input_grad(model, x_adv, loss_labels)
        if momentum is None:
            step_dir = np.sign(g)
        else:
            l1 = np.abs(g).reshape(len(x), -1).sum(axis=1).reshape((-1,) + (1,) * (x.ndim - 1))
            buf = momentum * buf + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            step_dir = np.sign(buf)
        x_adv = _project_clip(x, x_adv + sign_dir * spec.step_size * step_dir, spec.epsilon)
    return _finish(model, x, x_adv, y, spec, targets)


def pgd(model, x, y, spec: AttackSpec) -> AdvBatch:
    """Projected gradient descent with a seeded uniform start in the ball
    (spec.random_start=False gives the deterministic zero start)."""
    if spec.kind != "PGD":
        raise ContractViolation("spec.kind must be PGD")
    return _iterative_linf(model, x, y, spec, random_start=spec.random_start, momentum=None)


def bim(model, x, y, spec: AttackSpec) -> AdvBatch:
    """Basic iterative method: PGD loop from a zero start."""
    if spec.kind != "BIM":
        raise ContractViolation("spec.kind must be BIM")
    return _iterative_linf(model, x, y, spec, random_start=False, momentum=None)


def mim(model, x, y, spec: AttackSpec) -> AdvBatch:
    """Momentum iterative method: g <- mu*g + grad/||grad||_1, step by sign(g)."""
    if spec.kind != "MIM":
        raise ContractViolation("spec.kind must be MIM")
    return _iterative_linf(model, x, y, spec, random_start=False, momentum=spec.momentum)


def cw_l2(model, x, y, spec: AttackSpec) -> AdvBatch:
    """Carlini-Wagner L2 in tanh space with fixed trade-off constant.

    Gradient descent on ||x'-x||^2 + c * hinge(logits); keeps the successful
    candidate with the smallest L2 per sample, returns the original input
    where no candidate ever succeeded, then rescales to the L2 budget.
    """
    if spec.kind != "CW":
        raise ContractViolation("spec.kind must be CW")
    x = np.asarray(x, dtype=np.float32)
    b = len(x)
    rng = np.random.default_rng(spec.seed)
    targets = _attack_labels(model, y, spec, rng)
    hinge_labels = targets if spec.targeted else np.asarray(y)
    x64 = np.clip(x.astype(np.float64), 1e-6, 1.0 - 1e-6)
    w = np.arctanh(2.0 * x64 - 1.0)
    x_flat = x.reshape(b, -1)
    best = x.copy()
    best_l2 = np.full(b, np.inf)
    found = np.zeros(b, dtype=bool)
    for _ in range(spec.steps):
        w_node = dc.Tensor(w)
        x_cand = dc.affine(dc.tanh(w_node), 0.5, 0.5)
        logits = modelsmod.logits_graph(model, x_cand)
        dist = dc.sum_all(dc.square(dc.sub(dc.flatten_rows(x_cand), dc.Tensor(x_flat))))
        hinge = dc.sum_all(dc.cw_margin_rows(logits, hinge_labels, kappa=0.0, targeted=spec.targeted))
        obj = dist + spec.cw_c * hinge
        g = dc.gradients(obj, [w_node])[0]

        cand = x_cand.value.astype(np.float32)
        pred = logits.value.argmax(axis=1)
        ok = (pred == targets) if spec.targeted else (pred != np.asarray(y))
        l2 = perturbation_norms(x, cand, "L2")
        better = ok & (l2 < best_l2)
        best[better] = cand[better]
        best_l2[better] = l2[better]
        found |= better
        w = w - spec.cw_lr * g
    x_adv = np.where(found.reshape((-1,) + (1,) * (x.ndim - 1)), best, x)
    x_adv = _rescale_l2(x, x_adv, spec.epsilon)
    return _finish(model, x, x_adv, y, spec, targets)


def _rescale_l2(x, x_adv, eps) -> np.ndarray:
    d = x_adv.astype(np.float64) - x.astype(np.float64)
    l2 = np.sqrt((d.reshape(len(x), -1) ** 2).sum(axis=1))
    scale = np.ones(len(x))
    over = l2 > eps
    scale[over] = eps / l2[over]
    out = x.astype(np.float64) + d * scale.reshape((-1,) + (1,) * (x.ndim - 1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def deepfool(model, x, y, spec: AttackSpec) -> AdvBatch:
    """Iterative minimal perturbation toward the nearest linearized decision
    boundary, overshoot (1+eta), stopping on a flip of the model's original
    prediction. `y` is used only for the success flags and the early exit on
    already-misclassified inputs."""
    if spec.kind != "DF":
        raise ContractViolation("spec.kind must be DF")
    if spec.targeted:
        raise ContractViolation("deepfool is untargeted only")
    x = np.asarray(x, dtype=np.float32)
    b = len(x)
    n = model.arch.num_classes
    k0 = modelsmod.predict_labels(model, x)
    active = k0 == np.asarray(y)  # already-misclassified inputs stay untouched
    x_cur = x.copy()
    r_total = np.zeros(x.shape, dtype=np.float64)
    eta = spec.df_overshoot
    for _ in range(spec.steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xa = x_cur[idx]
        x_node = dc.Tensor(xa)
        logits = modelsmod.logits_graph(model, x_node)
        z = logits._val
        grads = np.stack(
            [dc.gradients(dc.class_logit_sum(logits, i), [x_node])[0] for i in range(n)]
        )  # [N, B_act, ...]
        ka = k0[idx]
        rows = np.arange(len(idx))
        f = z - z[rows, ka][:, None]  # [B_act, N]
        wdiff = grads - grads[ka, rows]  # [N, B_act, ...]
        wnorm = np.sqrt((wdiff.reshape(n, len(idx), -1) ** 2).sum(axis=2)).T  # [B_act, N]
        ratio = np.abs(f) / np.maximum(wnorm, 1e-12)
        ratio[rows, ka] = np.inf
        l = ratio.argmin(axis=1)
        coeff = (np.abs(f[rows, l]) + 1e-6) / np.maximum(wnorm[rows, l] ** 2, 1e-12)
        r_step = coeff.reshape((-1,) + (1,) * (x.ndim - 1)) * wdiff[l, rows]
        r_total[idx] += r_step
        x_cur[idx] = (x[idx].astype(np.float64) + (1.0 + eta) * r_total[idx]).astype(np.float32)
        pred = modelsmod.probs_graph(model, dc.Tensor(x_cur[idx])).value.argmax(axis=1)
        flipped = pred != ka
        active[idx[flipped]] = False
    x_adv = _rescale_l2(x, x_cur, spec.epsilon)
    return _finish(model, x, x_adv, y, spec)


def adaptive_attack(model, rect_cfg, x, y, spec: AttackSpec) -> AdvBatch:
    """Multi-objective attack: PGD-style ascent on
    L_cls - L_aux + sigma * L_ent using the defender's auxiliary task."""
    if spec.kind != "ADAPTIVE":
        raise ContractViolation("spec.kind must be ADAPTIVE")
    if rect_cfg is not None and rect_cfg.aux_kind != model.arch.aux_kind:
        raise ContractViolation("rectifier aux kind does not match the model")
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(spec.seed)
    if spec.random_start:
        x_adv = _project_clip(x, x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), spec.epsilon)
    else:
        x_adv = x.copy()
    for _ in range(spec.steps):
        x_node = dc.Tensor(x_adv)
        pt = modelsmod._param_tensors(model)
        logits = modelsmod.logits_graph(model, x_node, pt)
        loss = dc.softmax_cross_entropy(logits, y) - modelsmod.aux_loss_graph(model, x_node, pt)
        if spec.sigma != 0.0:
            loss = loss + spec.sigma * dc.entropy_loss(dc.softmax(logits))
        g = dc.gradients(loss, [x_node])[0]
        x_adv = _project_clip(x, x_adv + spec.step_size * np.sign(g), spec.epsilon)
    return _finish(model, x, x_adv, y, spec)


def adaptive_objective_grad(model, x, y, sigma: float) -> np.ndarray:
    """Input gradient of the composite adaptive objective (test surface)."""
    x_node = dc.Tensor(np.asarray(x, dtype=np.float32))
    pt = modelsmod._param_tensors(model)
    logits = modelsmod.logits_graph(model, x_node, pt)
    loss = dc.softmax_cross_entropy(logits, y) - modelsmod.aux_loss_graph(model, x_node, pt)
    if sigma != 0.0:
        loss = loss + sigma * dc.entropy_loss(dc.softmax(logits))
    return dc.gradients(loss, [x_node])[0]


def bpda_avg_attack(model, rectifier_fn, x, y, spec: AttackSpec) -> AdvBatch:
    """PGD loop through the defense, substituting identity for the backward
    pass: each step averages, per sample, the classification-loss input
    gradients evaluated at the rectifier's intermediate purified images.

    `rectifier_fn(x) -> (snapshots, rounds_used)` must return the per-round
    purified batches (list of [B,...] arrays) and how many rounds each
    sample actually ran (0 means detected clean: the gradient is taken at
    the input itself)."""
    if spec.kind != "BPDA":
        raise ContractViolation("spec.kind must be BPDA")
    x = np.asarray(x, dtype=np.float32)
    rng = np.random.default_rng(spec.seed)
    if spec.random_start:
        x_adv = _project_clip(x, x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape), spec.epsilon)
    else:
        x_adv = x.copy()
    bshape = (-1,) + (1,) * (x.ndim - 1)
    for _ in range(spec.steps):
        snapshots, rounds_used = rectifier_fn(x_adv)
        rounds_used = np.asarray(rounds_used)
        acc = np.zeros(x.shape, dtype=np.float64)
        count = np.zeros(len(x), dtype=np.float64)
        passthrough = rounds_used == 0
        if passthrough.any():
            g = _cls_input_grad(model, x_adv, y)
            mask = passthrough.reshape(bshape)
            acc += g * mask
            count += passthrough
        for r, snap in enumerate(snapshots):
            live = rounds_used > r
            if not live.any():
                break
            g = _cls_input_grad(model, snap.astype(np.float32), y)
            acc += g * live.reshape(bshape)
            count += live
        avg = acc / np.maximum(count, 1.0).reshape(bshape)
        x_adv = _project_clip(x, x_adv + spec.step_size * np.sign(avg), spec.epsilon)
    return _finish(model, x, x_adv, y, spec)


_DISPATCH = {
    "FGSM": fgsm,
    "PGD": pgd,
    "BIM": bim,
    "MIM": mim,
    "CW": cw_l2,
    "DF": deepfool,
}


def run_attack(model, x, y, spec: AttackSpec, rect_cfg=None, rectifier_fn=None) -> AdvBatch:
    """Dispatch by spec.kind. ADAPTIVE takes the rectifier config, BPDA the
    rectifier intermediates callback."""
    if spec.kind == "ADAPTIVE":
        return adaptive_attack(model, rect_cfg, x, y, spec)
    if spec.kind == "BPDA":
        if rectifier_fn is None:
            raise ContractViolation("BPDA needs a rectifier_fn exposing intermediates")
        return bpda_avg_attack(model, rectifier_fn, x, y, spec)
    return _DISPATCH[spec.kind](model, x, y, spec)


# ---------------------------------------------------------------------------
# serialization: dataset dump + JSON sidecar with the full spec


def sidecar_path(dump_path) -> str:
    return str(dump_path) + ".attack.json"


def save_attack_dump(batch: AdvBatch, path, num_classes: int, tag: str = ""):
    ds = datamod.Dataset(
        images=batch.x_adv,
        labels=batch.y_true,
        num_classes=num_classes,
        split=tag or batch.spec.kind,
        provenance={"source": "attack", "kind": batch.spec.kind},
    )
    datamod.save_dump(ds, path)
    side = {
        "spec": batch.spec.to_json(),
        "tag": tag or batch.spec.kind,
        "success_rate": batch.success_rate,
        "y_target": None if batch.y_target is None else [int(t) for t in batch.y_target],
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def load_attack_dump(path):
    """Returns (Dataset of adversarial images, AttackSpec, sidecar dict)."""
    ds = datamod.load_dump(path)
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        side = json.load(fh)
    return ds, AttackSpec.from_json(side["spec"]), side
