"""Encoder/classifier/auxiliary-head models and joint training.

A model is an encoder E (stack of dense+activation layers), a linear
classifier head C over the latent code, and an auxiliary head H that is
either a reconstruction decoder (REC) or the label-consistency task (LC,
which reuses the classifier over rotated inputs and needs no parameters).

Parameter naming schema (fixed, used by the checkpoint format):
    encoder.<k>.W / encoder.<k>.b   k-th encoder layer
    cls.W / cls.b                   classifier head
    aux.<k>.W / aux.<k>.b           k-th decoder layer (REC only)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .errors import BadMagic, ContractViolation, FormatError, Truncated, TrainingDiverged, VersionMismatch

CHECKPOINT_MAGIC = b"RLCK"
CHECKPOINT_VERSION = 1

AUX_KINDS = ("REC", "LC")
ACTIVATIONS = {"relu": dc.relu, "sigmoid": dc.sigmoid, "identity": lambda t: t}


@dataclass(frozen=True)
class ArchDescriptor:
    """Network shape. `encoder_widths` lists every encoder layer width in
    order (the last entry is the latent width); an empty tuple means the
    encoder is the identity on the flattened input."""

    input_shape: tuple  # (C, H, W)
    encoder_widths: tuple
    num_classes: int
    aux_kind: str = "REC"
    decoder_widths: tuple = ()  # REC hidden widths; final layer to input size is implicit
    activation: str = "relu"
    lc_rotations: tuple = (1, 2, 3)  # quarter turns used by the LC task

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be >= 2")
        if self.aux_kind not in AUX_KINDS:
            raise ContractViolation(f"aux_kind must be one of {AUX_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if any(w < 1 for w in self.encoder_widths) or any(w < 1 for w in self.decoder_widths):
            raise ContractViolation("layer widths must be >= 1")
        if self.aux_kind == "LC" and self.input_shape[1] != self.input_shape[2]:
            raise ContractViolation("LC rotations require square images")

    @property
    def flat_input(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    @property
    def latent_width(self) -> int:
        return self.encoder_widths[-1] if self.encoder_widths else self.flat_input


def mnist_fcn_arch(aux_kind: str = "REC") -> ArchDescriptor:
    """Default FCN for 28x28 grayscale digits: 784-256-128 encoder,
    10-way classifier, 128-256-784 sigmoid decoder for REC."""
    return ArchDescriptor(
        input_shape=(1, 28, 28),
        encoder_widths=(256, 128),
        num_classes=10,
        aux_kind=aux_kind,
        decoder_widths=(256,),
        activation="relu",
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.1
    lambda_aux: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.lambda_aux < 0:
            raise ContractViolation("learning_rate must be > 0 and lambda_aux >= 0")


@dataclass
class Model:
    arch: ArchDescriptor
    params: dict  # name -> float32 ndarray, schema documented above
    seed: int


def _layer_dims(arch: ArchDescriptor):
    enc = []
    prev = arch.flat_input
    for k, w in enumerate(arch.encoder_widths):
        enc.append((f"encoder.{k}", prev, w))
        prev = w
    cls = ("cls", prev, arch.num_classes)
    aux = []
    if arch.aux_kind == "REC":
        d_prev = prev
        widths = list(arch.decoder_widths) + [arch.flat_input]
        for k, w in enumerate(widths):
            aux.append((f"aux.{k}", d_prev, w))
            d_prev = w
    return enc, cls, aux


def param_names(arch: ArchDescriptor):
    enc, cls, aux = _layer_dims(arch)
    names = []
    for prefix, _, _ in enc + [cls] + aux:
        names += [f"{prefix}.W", f"{prefix}.b"]
    return names


def init_model(arch: ArchDescriptor, seed: int) -> Model:
    """Uniform(-s, s) init with s = 1/sqrt(fan_in), drawn in schema order."""
    rng = np.random.default_rng(seed)
    enc, cls, aux = _layer_dims(arch)
    params = {}
    for prefix, fan_in, fan_out in enc + [cls] + aux:
        s = 1.0 / np.sqrt(fan_in)
        params[f"{prefix}.W"] = rng.uniform(-s, s, size=(fan_in, fan_out)).astype(np.float32)
        params[f"{prefix}.b"] = rng.uniform(-s, s, size=fan_out).astype(np.float32)
    return Model(arch=arch, params=params, seed=seed)


# ---------------------------------------------------------------------------
# graph builders (shared by training, attacks and the rectifier)


def _param_tensors(model: Model) -> dict:
    return {k: dc.Tensor(v) for k, v in model.params.items()}


def _encode(arch: ArchDescriptor, pt: dict, x_flat: dc.Tensor) -> dc.Tensor:
    act = ACTIVATIONS[arch.activation]
    z = x_flat
    for k in range(len(arch.encoder_widths)):
        z = act(dc.forward_dense(z, pt[f"encoder.{k}.W"], pt[f"encoder.{k}.b"]))
    return z


def _logits(arch: ArchDescriptor, pt: dict, x_flat: dc.Tensor) -> dc.Tensor:
    z = _encode(arch, pt, x_flat)
    return dc.forward_dense(z, pt["cls.W"], pt["cls.b"])


def _decode(arch: ArchDescriptor, pt: dict, z: dc.Tensor) -> dc.Tensor:
    act = ACTIVATIONS[arch.activation]
    n_layers = len(arch.decoder_widths) + 1
    h = z
    for k in range(n_layers):
        h = dc.forward_dense(h, pt[f"aux.{k}.W"], pt[f"aux.{k}.b"])
        h = dc.sigmoid(h) if k == n_layers - 1 else act(h)
    return h


def probs_graph(model: Model, x: dc.Tensor, pt: dict | None = None) -> dc.Tensor:
    """Softmax class probabilities as a tape node. `x` is [B,C,H,W] or [B,F]."""
    pt = pt or _param_tensors(model)
    return dc.softmax(_logits(model.arch, pt, dc.flatten_rows(x)))


def logits_graph(model: Model, x: dc.Tensor, pt: dict | None = None) -> dc.Tensor:
    pt = pt or _param_tensors(model)
    return _logits(model.arch, pt, dc.flatten_rows(x))


def cls_loss_graph(model: Model, x: dc.Tensor, labels, pt: dict | None = None) -> dc.LossValue:
    pt = pt or _param_tensors(model)
    return dc.softmax_cross_entropy(_logits(model.arch, pt, dc.flatten_rows(x)), labels)


def aux_rows_graph(model: Model, x: dc.Tensor, pt: dict | None = None) -> dc.Tensor:
    """Per-sample auxiliary loss as a tape node [B].

    REC: mean squared reconstruction error of the decoded latent.
    LC:  mean KL(p(x) || p(rot_k(x))) over the configured rotation set,
         with gradients flowing through both prediction branches.
    """
    arch = model.arch
    pt = pt or _param_tensors(model)
    x_flat = dc.flatten_rows(x)
    if arch.aux_kind == "REC":
        z = _encode(arch, pt, x_flat)
        return dc.mse_rows(_decode(arch, pt, z), x_flat)
    if len(x.shape) != 4:
        raise ContractViolation("LC aux loss needs [B,C,H,W] input")
    p_orig = dc.softmax(_logits(arch, pt, x_flat))
    rows = None
    for k in arch.lc_rotations:
        p_rot = dc.softmax(_logits(arch, pt, dc.flatten_rows(dc.rotate_hw(x, k))))
        term = dc.kl_rows(p_orig, p_rot)
        rows = term if rows is None else dc.add_rows(rows, term)
    return dc.scale_rows(rows, np.full(x.shape[0], 1.0 / len(arch.lc_rotations)))


def aux_loss_graph(model: Model, x: dc.Tensor, pt: dict | None = None) -> dc.LossValue:
    return dc.mean_rows(aux_rows_graph(model, x, pt))


# ---------------------------------------------------------------------------
# public inference surface


def _check_input(model: Model, x: np.ndarray):
    c, h, w = model.arch.input_shape
    if x.ndim != 4 or x.shape[1:] != (c, h, w):
        raise ContractViolation(f"input shape {x.shape} does not match arch {(c, h, w)}")
    if x.min() < -1e-6 or x.max() > 1.0 + 1e-6:
        raise ContractViolation("inputs must lie in [0,1]")


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities [B,N] (float32) for images in [0,1]."""
    x = np.asarray(x, dtype=np.float32)
    _check_input(model, x)
    return probs_graph(model, dc.Tensor(x)).value


def predict_labels(model: Model, x: np.ndarray) -> np.ndarray:
    return predict(model, x).argmax(axis=1)


def aux_loss(model: Model, x: np.ndarray) -> dc.LossValue:
    """Batch-mean auxiliary loss for images in [0,1]."""
    x = np.asarray(x, dtype=np.float32)
    _check_input(model, x)
    return aux_loss_graph(model, dc.Tensor(x))


def aux_loss_rows(model: Model, x: np.ndarray) -> np.ndarray:
    """Per-sample auxiliary loss values (no gradient use)."""
    x = np.asarray(x, dtype=np.float32)
    _check_input(model, x)
    return aux_rows_graph(model, dc.Tensor(x)).value.astype(np.float64)


# ---------------------------------------------------------------------------
# training


def train_joint(data, arch: ArchDescriptor, cfg: TrainConfig, progress=None, return_history=False):
    """Joint SGD on L_cls + lambda_aux * L_aux over mini-batches.

    Deterministic for a fixed (cfg.seed, data order). When lambda_aux == 0
    the auxiliary graph is skipped entirely, so the parameter trajectory is
    bit-identical to classifier-only training.
    """
    images = np.asarray(data.images, dtype=np.float32)
    labels = np.asarray(data.labels)
    if len(images) == 0:
        raise ContractViolation("training set is empty")
    model = init_model(arch, seed=cfg.seed)
    rng_shuffle = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    history = {"batch_loss": [], "epoch_end_avg": []}
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = images[idx], labels[idx]
            pt = _param_tensors(model)
            x_node = dc.Tensor(xb)
            loss = cls_loss_graph(model, x_node, yb, pt)
            if cfg.lambda_aux > 0:
                loss = loss + cfg.lambda_aux * aux_loss_graph(model, x_node, pt)
            if not np.isfinite(loss.scalar):
                raise TrainingDiverged(epoch)
            names = list(pt.keys())
            grads = dc.gradients(loss, [pt[k] for k in names])
            for name, g in zip(names, grads):
                model.params[name] = (
                    model.params[name].astype(np.float64) - cfg.learning_rate * g
                ).astype(np.float32)
            history["batch_loss"].append(loss.scalar)
        tail = history["batch_loss"][-10:]
        history["epoch_end_avg"].append(float(np.mean(tail)))
        if progress is not None:
            progress(epoch, history["epoch_end_avg"][-1])
    return (model, history) if return_history else model


# ---------------------------------------------------------------------------
# checkpoint persistence


def _arch_to_json(arch: ArchDescriptor) -> dict:
    d = asdict(arch)
    for k in ("input_shape", "encoder_widths", "decoder_widths", "lc_rotations"):
        d[k] = list(d[k])
    return d


def _arch_from_json(d: dict) -> ArchDescriptor:
    return ArchDescriptor(
        input_shape=tuple(d["input_shape"]),
        encoder_widths=tuple(d["encoder_widths"]),
        num_classes=d["num_classes"],
        aux_kind=d["aux_kind"],
        decoder_widths=tuple(d["decoder_widths"]),
        activation=d["activation"],
        lc_rotations=tuple(d["lc_rotations"]),
    )


def save_checkpoint(model: Model, path):
    """RLCK container: magic, version u32le, header-length u32le, JSON
    header (arch, seed, parameter name/shape table), then raw little-endian
    float32 payloads in table order."""
    table = [[name, list(model.params[name].shape)] for name in param_names(model.arch)]
    header = json.dumps(
        {"arch": _arch_to_json(model.arch), "seed": model.seed, "params": table},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name, _ in table:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"not a checkpoint file: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise Truncated("checkpoint header truncated")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(blob) < 12 + hlen:
        raise Truncated("checkpoint header truncated")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    arch = _arch_from_json(header["arch"])
    params = {}
    off = 12 + hlen
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if len(blob) < off + nbytes:
            raise Truncated(f"checkpoint truncated in parameter {name}")
        params[name] = np.frombuffer(blob[off : off + nbytes], dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(blob):
        raise FormatError("trailing bytes after final parameter")
    return Model(arch=arch, params=params, seed=header["seed"])
