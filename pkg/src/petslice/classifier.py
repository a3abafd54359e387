"""Residual slice classifier, focal loss, training loop and scoring."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    Adam,
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool2d,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    ResidualBlock,
    Sequential,
    ShapeError,
    sigmoid,
)
from .nn.checkpoint import load_checkpoint, restore, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    input_size: tuple = (64, 64)
    in_channels: int = 3
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: tuple = (2, 2, 2)
    fc_widths: tuple = (64, 1)
    stem_stride: int = 2
    stem_pool: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.blocks_per_stage = tuple(int(v) for v in self.blocks_per_stage)
        self.fc_widths = tuple(int(v) for v in self.fc_widths)
        self.validate()

    def validate(self):
        if self.in_channels != 3:
            raise ValueError(f"the network takes 3-channel inputs, got in_channels={self.in_channels}")
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ValueError(
                f"stage_widths {self.stage_widths} and blocks_per_stage "
                f"{self.blocks_per_stage} must be non-empty and the same length"
            )
        if any(b < 1 for b in self.blocks_per_stage) or any(w < 1 for w in self.stage_widths):
            raise ValueError("every stage needs >= 1 block and a positive width")
        if not self.fc_widths or self.fc_widths[-1] != 1:
            raise ValueError(f"fc_widths must end in a single logit, got {self.fc_widths}")
        h, w = self.input_size
        down = self.stem_stride * (2 if self.stem_pool else 1) * 2 ** (len(self.stage_widths) - 1)
        if h < down or w < down:
            raise ValueError(
                f"input {h}x{w} too small for total downsampling factor {down}"
            )


@dataclass
class TrainConfig:
    lr: float = 1e-3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must lie in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.batch_size < 2 or self.epochs < 1:
            raise ValueError("batch_size must be >= 2 and epochs >= 1")


class SliceClassifier(Module):
    """Stem conv -> residual stages -> global average pool -> FC stack -> logit."""

    def __init__(self, config, seed=0, dtype=np.float32):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        bn = dict(momentum=config.bn_momentum, eps=config.bn_eps, dtype=dtype)
        w0 = config.stage_widths[0]
        stem = [Conv2d(3, w0, 3, config.stem_stride, 1, bias=False, rng=rng, dtype=dtype),
                BatchNorm2d(w0, **bn), ReLU()]
        names = ["conv", "bn", "relu"]
        if config.stem_pool:
            stem.append(MaxPool2d(2, 2))
            names.append("pool")
        self.stem = Sequential(*stem, names=names)

        blocks, block_names, cin = [], [], w0
        for s, (width, nblocks) in enumerate(zip(config.stage_widths, config.blocks_per_stage)):
            for b in range(nblocks):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(ResidualBlock(cin, width, stride, rng=rng, bn_momentum=config.bn_momentum,
                                            bn_eps=config.bn_eps, dtype=dtype))
                block_names.append(f"stage{s}.block{b}")
                cin = width
        self.body = Sequential(*blocks, names=block_names)
        self.pool = GlobalAvgPool2d()

        head, head_names = [], []
        for i, width in enumerate(config.fc_widths):
            last = i == len(config.fc_widths) - 1
            head.append(Linear(cin, width, rng=rng, gain=1.0 if last else 2.0, dtype=dtype))
            head_names.append(f"fc{i}")
            if not last:
                head.append(ReLU())
                head_names.append(f"relu{i}")
            cin = width
        self.head = Sequential(*head, names=head_names)

    def children(self):
        return [("stem", self.stem), ("body", self.body), ("pool", self.pool), ("head", self.head)]

    def forward(self, x):
        """Returns logits of shape (N,)."""
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.config.input_size:
            raise ShapeError(
                f"model expects (N, 3, {self.config.input_size[0]}, {self.config.input_size[1]}), "
                f"got {x.shape}"
            )
        h = self.pool.forward(self.body.forward(self.stem.forward(x)))
        return self.head.forward(h)[:, 0]

    def backward(self, dlogits):
        d = self.head.backward(dlogits[:, None])
        return self.stem.backward(self.body.backward(self.pool.backward(d)))

    def predict_proba(self, x, batch_size=256):
        was_training = self.training
        self.eval()
        try:
            out = [sigmoid(self.forward(x[i : i + batch_size])) for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)

    @property
    def final_bias(self):
        return self.head.layers[-1].params["bias"]


def build_model(config, seed=0, dtype=np.float32):
    """Fresh classifier with Kaiming-normal weights drawn from ``seed``."""
    return SliceClassifier(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Focal loss
# ---------------------------------------------------------------------------

def _log_sigmoid(z):
    # log(sigmoid(z)) = -softplus(-z)
    return -np.logaddexp(0.0, -z)


def focal_loss_terms(logits, y, alpha=0.25, gamma=2.0):
    """Per-sample focal loss and its derivative with respect to the logit.

    loss = -alpha * y * (1-p)^gamma * log p - (1-alpha) * (1-y) * p^gamma * log(1-p)

    Everything is evaluated from the logit (log p = -softplus(-z),
    1 - p = sigmoid(-z)), so saturated probabilities never hit log(0).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = sigmoid(z)
    q = sigmoid(-z)
    log_p = _log_sigmoid(z)
    log_q = _log_sigmoid(-z)
    qg = q ** gamma
    pg = p ** gamma
    loss = -alpha * y * qg * log_p - (1.0 - alpha) * (1.0 - y) * pg * log_q
    grad = (alpha * y * qg * (gamma * p * log_p - q)
            + (1.0 - alpha) * (1.0 - y) * pg * (p - gamma * q * log_q))
    return loss, grad


def focal_loss(p, y, alpha=0.25, gamma=2.0):
    """Focal loss for a probability ``p`` (converted to a logit internally).

    Returns ``(loss, dloss/dlogit)``; arrays in, arrays out.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("focal_loss expects p strictly inside (0, 1); pass logits to focal_loss_terms")
    z = np.log(p) - np.log1p(-p)
    loss, grad = focal_loss_terms(z, y, alpha, gamma)
    return (loss[()] if loss.ndim == 0 else loss), (grad[()] if grad.ndim == 0 else grad)


def batch_focal_loss(logits, y, alpha=0.25, gamma=2.0):
    """Mean focal loss over the batch and d(mean)/d(logits)."""
    loss, grad = focal_loss_terms(logits, y, alpha, gamma)
    n = max(len(loss), 1)
    return float(loss.mean()), (grad / n).astype(np.asarray(logits).dtype, copy=False)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    epoch: int
    val_loss: float
    step: int
    params: dict = field(repr=False)
    buffers: dict = field(repr=False)
    adam_m: dict = field(repr=False)
    adam_v: dict = field(repr=False)

    @classmethod
    def capture(cls, model, optimizer, epoch, val_loss):
        return cls(
            epoch=epoch, val_loss=val_loss, step=optimizer.t,
            params={n: p.copy() for n, p, _ in model.named_parameters()},
            buffers={n: b.copy() for n, b in model.named_buffers()},
            adam_m={n: s.m.copy() for n, s in optimizer.states.items()},
            adam_v={n: s.v.copy() for n, s in optimizer.states.items()},
        )

    def apply(self, model):
        for n, p, _ in model.named_parameters():
            p[...] = self.params[n]
        for n, b in model.named_buffers():
            b[...] = self.buffers[n]
        return model

    def tensors(self):
        out = [(f"param/{n}", a) for n, a in self.params.items()]
        out += [(f"buffer/{n}", a) for n, a in self.buffers.items()]
        out += [(f"adam_m/{n}", a) for n, a in self.adam_m.items()]
        out += [(f"adam_v/{n}", a) for n, a in self.adam_v.items()]
        return out


def evaluate_loss(model, x, y, cfg, batch_size=256):
    """Mean focal loss over a dataset in eval mode."""
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        for i in range(0, len(x), batch_size):
            z = model.forward(x[i : i + batch_size])
            loss, _ = focal_loss_terms(z, y[i : i + batch_size], cfg.focal_alpha, cfg.focal_gamma)
            total += float(loss.sum())
    finally:
        model.train(was_training)
    return total / len(x)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch-norm needs >= 2 samples; fold a trailing singleton into the previous batch
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def train(model, train_x, train_y, val_x, val_y, cfg, on_epoch=None):
    """Epoch loop with Adam and best-validation-loss model selection.

    After every epoch the full validation set is scored in eval mode; the
    model state is kept as the checkpoint whenever the validation loss
    strictly improves.

    Returns:
        (best Checkpoint, log) where log is a list of dicts with keys
        epoch, train_loss, val_loss, checkpoint_saved.
    """
    if len(train_x) < 2 or len(val_x) < 1:
        raise ValueError(f"need >= 2 training and >= 1 validation samples, got {len(train_x)}/{len(val_x)}")
    train_y = np.asarray(train_y, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    best, history = None, []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(len(train_x), cfg.batch_size, rng)):
            model.zero_grad()
            logits = model.forward(train_x[idx])
            loss, dlogits = batch_focal_loss(logits, train_y[idx], cfg.focal_alpha, cfg.focal_gamma)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}, batch {b}")
            model.backward(dlogits)
            try:
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * len(idx)
            seen += len(idx)
        val_loss = evaluate_loss(model, val_x, val_y, cfg)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        improved = best is None or val_loss < best.val_loss
        if improved:
            best = Checkpoint.capture(model, opt, epoch, val_loss)
        row = {"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss,
               "checkpoint_saved": bool(improved)}
        history.append(row)
        log.info("epoch %d train %.5f val %.5f%s", epoch, row["train_loss"], val_loss,
                 " *" if improved else "")
        if on_epoch is not None:
            on_epoch(row)
    return best, history


def save_model_checkpoint(path, checkpoint, model_cfg, seed, extra=None):
    header = {
        "architecture": _jsonable(asdict(model_cfg)),
        "step": checkpoint.step,
        "epoch": checkpoint.epoch,
        "val_loss": checkpoint.val_loss,
        "seed": seed,
    }
    header.update(extra or {})
    return save_checkpoint(path, checkpoint.tensors(), header)


def load_model(path):
    """Rebuilds a classifier from a checkpoint file (eval mode)."""
    header, tensors = load_checkpoint(path)
    arch = dict(header["architecture"])
    model = build_model(ModelConfig(**arch), seed=header.get("seed", 0))
    restore(model, tensors)
    return model.eval(), header


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict(model, sample, threshold=0.5):
    """Probability and label for one (3, H, W) input; p >= threshold is positive."""
    x = np.asarray(sample, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    p = float(model.predict_proba(x)[0])
    return p, label_from_probability(p, threshold)


def label_from_probability(p, threshold=0.5):
    out = (np.asarray(p) >= threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def score_dataset(model, inputs, records, threshold=0.5):
    """Scores every sample; rows come back ordered by (patient_id, slice_index).

    ``records`` are per-sample dicts carrying patient_id, center_id,
    slice_index, label and tumor_suvmax, aligned with ``inputs``.
    """
    h, w = model.config.input_size
    if inputs.ndim != 4 or tuple(inputs.shape[1:]) != (3, h, w):
        raise ShapeError(f"dataset inputs {inputs.shape} do not match model input (3, {h}, {w})")
    if len(inputs) != len(records):
        raise ValueError(f"{len(inputs)} inputs but {len(records)} records")
    order = sorted(range(len(records)),
                   key=lambda i: (records[i]["patient_id"], records[i]["slice_index"]))
    p = model.predict_proba(np.ascontiguousarray(inputs[order])) if order else np.zeros(0)
    rows = []
    for k, i in enumerate(order):
        r = records[i]
        prob = float(p[k])
        rows.append({
            "sample_id": f"{r['patient_id']}:{r['slice_index']}",
            "patient_id": r["patient_id"],
            "center_id": r["center_id"],
            "p": prob,
            "pred": int(prob >= threshold),
            "label": int(r["label"]),
            "tumor_suvmax": r.get("tumor_suvmax"),
        })
    return rows


__all__ = [
    "Checkpoint", "ModelConfig", "SliceClassifier", "TrainConfig", "TrainingDivergedError",
    "batch_focal_loss", "build_model", "evaluate_loss", "focal_loss", "focal_loss_terms",
    "label_from_probability", "load_model", "predict", "save_model_checkpoint", "score_dataset",
    "train",
]
