"""Test-time adversarial sample rectification.

The defense runs per sample with frozen model weights:

  1. detection gate: a sample whose auxiliary loss and prediction entropy
     both fall below thresholds calibrated from clean statistics is passed
     through untouched;
  2. reverse stage: sign-gradient descent on (L_aux - beta_max * L_ent),
     which raises prediction entropy and breaks confident misclassification;
  3. forward stage: sign-gradient descent on (L_aux + beta_min * L_ent),
     which settles the sample back into a confident prediction;
  4. the two stages repeat for up to `max_rounds` rounds, stopping early
     when the sample clears the thresholds (condition A) or clears the
     auxiliary threshold with a reversed label (condition B).

The stage weights are attack-aware: beta_max = alpha*(1 - v)^2 and
beta_min = alpha*v^2 where v is the normalized prediction entropy at stage
entry, so strongly-attacked (low entropy) samples receive more entropy
maximization and uncertain mask samples more entropy minimization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from . import models as modelsmod
from .entropy_stats import normalized_entropy
from .errors import ContractViolation

STOP_DETECTED_CLEAN = "detected-clean"
STOP_CONDITION_A = "condition-A"
STOP_CONDITION_B = "condition-B"
STOP_ROUND_LIMIT = "round-limit"


@dataclass(frozen=True)
class RectifierConfig:
    steps: int = 3              # T: sign-gradient steps per stage
    step_size: float = 0.1     # gamma
    alpha: float = 0.25
    max_rounds: int = 5        # R
    eps_pfy: float = 0.3       # L-inf budget around each stage's input
    aux_threshold: float = 0.0   # aux*
    ent_threshold: float = 0.0   # ent*
    detection_enabled: bool = True
    aux_kind: str = "REC"
    ent_threshold_normalized: bool = True  # thresholds in V_ent units (else raw bits)
    aux_weight: float = 0.0  # stage-objective scale on L_aux; 0 selects the kind default
    use_aux_loss: bool = True
    use_max_min: bool = True
    use_hss: bool = True
    use_beta: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.max_rounds < 1:
            raise ContractViolation("steps and max_rounds must be >= 1")
        if self.step_size <= 0 or self.alpha < 0 or self.eps_pfy < 0:
            raise ContractViolation("step_size must be > 0, alpha and eps_pfy >= 0")
        if self.aux_threshold < 0 or self.ent_threshold < 0:
            raise ContractViolation("thresholds must be non-negative")
        if self.aux_weight < 0:
            raise ContractViolation("aux_weight must be >= 0")
        if self.use_beta and not self.use_max_min:
            raise ContractViolation("attack-aware weighting requires the max-min scheme")
        if self.use_hss and not self.use_aux_loss:
            raise ContractViolation("the stopping heuristic requires the auxiliary loss")

    def resolved_aux_weight(self, flat_input: int) -> float:
        """Stage-objective scale on the auxiliary loss. REC's per-pixel-mean
        reconstruction loss has gradients far smaller than the bit-entropy
        term, so it defaults to 64 (for 784-pixel inputs this sits between
        mean and summed-over-pixels conventions); LC's KL rows are already
        on the entropy scale and default to 1."""
        if self.aux_weight > 0:
            return self.aux_weight
        return 64.0 * flat_input / 784.0 if self.aux_kind == "REC" else 1.0


@dataclass
class RoundRecord:
    v_ent_in: float      # batch entry of stage 1
    beta_max: float
    v_ent_mask: float    # after stage 1 == stage 2 entry
    beta_min: float
    v_ent_out: float     # after stage 2
    aux_out: float
    ent_out: float       # raw bits
    label_in: int
    label_out: int


@dataclass
class RectifyTrace:
    sample_id: int
    stop_reason: str
    rounds_used: int
    label_original: int
    label_final: int
    rounds: list = field(default_factory=list)  # RoundRecord per executed round


@dataclass
class PurifiedBatch:
    x_pfy: np.ndarray
    traces: list
    labels: np.ndarray  # predicted labels on x_pfy
    round_snapshots: list = field(default_factory=list)  # full-batch x after each round
    rounds_used: np.ndarray | None = None


def beta_max(v_ent, alpha: float):
    """Reverse-stage entropy weight alpha * (1 - v_ent)^2."""
    v = np.asarray(v_ent, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise ContractViolation("v_ent must lie in [0,1]")
    out = alpha * (1.0 - v) ** 2
    return float(out) if np.isscalar(v_ent) else out


def beta_min(v_ent, alpha: float):
    """Forward-stage entropy weight alpha * v_ent^2."""
    v = np.asarray(v_ent, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise ContractViolation("v_ent must lie in [0,1]")
    out = alpha * v**2
    return float(out) if np.isscalar(v_ent) else out


def _entropy_values(model, x: np.ndarray, normalized: bool) -> np.ndarray:
    probs = modelsmod.probs_graph(model, dc.Tensor(x)).value
    if normalized:
        return normalized_entropy(probs)
    return dc.entropy_rows_np(probs)


def calibrate_thresholds(model, clean_images: np.ndarray, multipliers=(1.0, 1.0),
                         normalized: bool = True) -> tuple:
    """(aux*, ent*) from clean statistics: mean aux loss and mean prediction
    entropy, each scaled by its multiplier (defaults 1.0)."""
    clean_images = np.asarray(clean_images, dtype=np.float32)
    if len(clean_images) == 0:
        raise ContractViolation("calibration set is empty")
    aux = modelsmod.aux_loss_rows(model, clean_images)
    ent = _entropy_values(model, clean_images, normalized)
    return float(aux.mean() * multipliers[0]), float(ent.mean() * multipliers[1])


def detect(model, x: np.ndarray, cfg: RectifierConfig) -> np.ndarray:
    """True where a sample looks clean: aux < aux* and entropy < ent*
    (both strict)."""
    x = np.asarray(x, dtype=np.float32)
    aux = modelsmod.aux_loss_rows(model, x)
    ent = _entropy_values(model, x, cfg.ent_threshold_normalized)
    return (aux < cfg.aux_threshold) & (ent < cfg.ent_threshold)


def _stage(model, x: np.ndarray, cfg: RectifierConfig, entropy_sign: float):
    """T sign-gradient descent steps on L_aux + entropy_sign*beta*L_ent,
    projected to the eps_pfy ball around this stage's input. Returns
    (x_new, v_ent_at_entry, beta_used)."""
    x0 = np.asarray(x, dtype=np.float32)
    probs_in = modelsmod.probs_graph(model, dc.Tensor(x0)).value
    v_in = normalized_entropy(probs_in)
    if cfg.use_max_min:
        if cfg.use_beta:
            beta = beta_max(v_in, cfg.alpha) if entropy_sign < 0 else beta_min(v_in, cfg.alpha)
        else:
            beta = np.full(len(x0), cfg.alpha)
    else:
        beta = np.zeros(len(x0))
    aux_w = cfg.resolved_aux_weight(model.arch.flat_input)
    x_cur = x0.copy()
    for _ in range(cfg.steps):
        x_node = dc.Tensor(x_cur)
        pt = modelsmod._param_tensors(model)
        rows = None
        if cfg.use_aux_loss:
            rows = dc.scale_rows(modelsmod.aux_rows_graph(model, x_node, pt),
                                 np.full(len(x0), aux_w))
        if cfg.use_max_min:
            ent = dc.entropy_rows(modelsmod.probs_graph(model, x_node, pt))
            weighted = dc.scale_rows(ent, entropy_sign * beta)
            rows = weighted if rows is None else dc.add_rows(rows, weighted)
        if rows is None:
            break  # no objective configured: identity stage
        loss = dc.mean_rows(rows)
        g = dc.gradients(loss, [x_node])[0]
        stepped = x_cur.astype(np.float64) - cfg.step_size * np.sign(g)
        d = np.clip(stepped - x0.astype(np.float64), -cfg.eps_pfy, cfg.eps_pfy)
        x_cur = np.clip(x0.astype(np.float64) + d, 0.0, 1.0).astype(np.float32)
    return x_cur, v_in, np.asarray(beta, dtype=np.float64)


def stage1_mask(model, x: np.ndarray, cfg: RectifierConfig) -> np.ndarray:
    """Reverse rectification: entropy maximization (masking)."""
    return _stage(model, x, cfg, entropy_sign=-1.0)[0]


def stage2_pfy(model, x_mask: np.ndarray, cfg: RectifierConfig) -> np.ndarray:
    """Forward rectification: entropy minimization (enlightenment)."""
    return _stage(model, x_mask, cfg, entropy_sign=+1.0)[0]


def rectify(model, x: np.ndarray, cfg: RectifierConfig, collect_snapshots: bool = False) -> PurifiedBatch:
    """Full defense over a batch; every sample stops within max_rounds."""
    if model.arch.aux_kind != cfg.aux_kind:
        raise ContractViolation(
            f"model aux kind {model.arch.aux_kind} != rectifier aux kind {cfg.aux_kind}"
        )
    x = np.asarray(x, dtype=np.float32)
    b = len(x)
    labels_orig = modelsmod.predict_labels(model, x)
    x_cur = x.copy()
    stop_reason = np.array([""] * b, dtype=object)
    rounds_used = np.zeros(b, dtype=np.int64)
    round_records = [[] for _ in range(b)]
    active = np.ones(b, dtype=bool)

    if cfg.detection_enabled:
        clean = detect(model, x, cfg)
        stop_reason[clean] = STOP_DETECTED_CLEAN
        active &= ~clean

    snapshots = []
    max_rounds = cfg.max_rounds if cfg.use_hss else 1
    for rnd in range(max_rounds):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        xa = x_cur[idx]
        labels_in = modelsmod.predict_labels(model, xa)

        x_mask, v_in, b_max = _stage(model, xa, cfg, entropy_sign=-1.0)
        x_pfy, v_mask, b_min = _stage(model, x_mask, cfg, entropy_sign=+1.0)
        x_cur[idx] = x_pfy
        rounds_used[idx] = rnd + 1

        probs_out = modelsmod.probs_graph(model, dc.Tensor(x_pfy)).value
        v_out = normalized_entropy(probs_out)
        ent_bits = dc.entropy_rows_np(probs_out)
        aux_out = modelsmod.aux_loss_rows(model, x_pfy) if cfg.use_aux_loss else np.full(len(idx), np.nan)
        labels_out = probs_out.argmax(axis=1)

        for j, i in enumerate(idx):
            round_records[i].append(RoundRecord(
                v_ent_in=float(v_in[j]), beta_max=float(b_max[j]),
                v_ent_mask=float(v_mask[j]), beta_min=float(b_min[j]),
                v_ent_out=float(v_out[j]), aux_out=float(aux_out[j]),
                ent_out=float(ent_bits[j]),
                label_in=int(labels_in[j]), label_out=int(labels_out[j]),
            ))
        if collect_snapshots:
            snapshots.append(x_cur.copy())

        if cfg.use_hss:
            ent_vals = v_out if cfg.ent_threshold_normalized else ent_bits
            aux_ok = aux_out < cfg.aux_threshold
            cond_a = aux_ok & (ent_vals < cfg.ent_threshold)
            reversal = labels_out != labels_orig[idx]
            cond_b = aux_ok & reversal & ~cond_a
            stop_reason[idx[cond_a]] = STOP_CONDITION_A
            stop_reason[idx[cond_b]] = STOP_CONDITION_B
            active[idx[cond_a | cond_b]] = False
        else:
            break

    # anything still active ran out of rounds (or the single no-HSS round)
    stop_reason[active] = STOP_ROUND_LIMIT

    labels_final = modelsmod.predict_labels(model, x_cur)
    traces = [
        RectifyTrace(
            sample_id=i,
            stop_reason=str(stop_reason[i]),
            rounds_used=int(rounds_used[i]),
            label_original=int(labels_orig[i]),
            label_final=int(labels_final[i]),
            rounds=round_records[i],
        )
        for i in range(b)
    ]
    return PurifiedBatch(x_pfy=x_cur, traces=traces, labels=labels_final,
                         round_snapshots=snapshots, rounds_used=rounds_used)


def aux_only_purify(model, x: np.ndarray, steps: int, step_size: float, eps_pfy: float) -> np.ndarray:
    """Baseline purifier: sign-gradient descent on the auxiliary loss alone,
    constrained to the eps_pfy ball around the input."""
    x0 = np.asarray(x, dtype=np.float32)
    x_cur = x0.copy()
    for _ in range(steps):
        x_node = dc.Tensor(x_cur)
        loss = modelsmod.aux_loss_graph(model, x_node)
        g = dc.gradients(loss, [x_node])[0]
        stepped = x_cur.astype(np.float64) - step_size * np.sign(g)
        d = np.clip(stepped - x0.astype(np.float64), -eps_pfy, eps_pfy)
        x_cur = np.clip(x0.astype(np.float64) + d, 0.0, 1.0).astype(np.float32)
    return x_cur


def snapshot_fn(model, cfg: RectifierConfig):
    """Adapter for the BPDA attack: x -> (round snapshots, rounds used)."""

    def fn(x):
        out = rectify(model, x, cfg, collect_snapshots=True)
        return out.round_snapshots, out.rounds_used

    return fn


def dump_traces(traces, path):
    """JSON-lines trace export, one object per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            fh.write(json.dumps(asdict(t), sort_keys=True) + "\n")
