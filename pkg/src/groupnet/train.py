"""Training: paired forward/backward passes, Nesterov SGD and the plateau schedule."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arch.model import Model, build_model, model_forward
from .arch.spec import spec_from_dict
from .checkpoint import MAGIC_CHECKPOINT, Container, read_container, write_container
from .data import Dataset, augment
from .tensor import softmax_cross_entropy

log = logging.getLogger(__name__)

DECAYED_ROLES = ("binary", "weight")
CSV_COLUMNS = ("epoch", "lr", "train_loss", "test_top1", "seconds")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}; aborting")


class MissingPretrainError(RuntimeError):
    pass


@dataclass
class Saved:
    """Activations saved by a train-mode forward, valid for exactly one backward."""

    token: int
    version: int
    run: object


@dataclass
class OptimState:
    lr: float
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainState:
    seed: int
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    acc_history: list = field(default_factory=list)
    lr_history: list = field(default_factory=list)
    best_acc: float = -1.0
    plateau: int = 0


def forward_pass(model: Model, batch: np.ndarray, mode: str = "train", engine: str = "float"):
    """Returns ``(logits, saved)``; eval mode uses running BN statistics and saves nothing."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    if train and model.inference_only:
        raise RuntimeError("packed inference models cannot be trained")
    logits, run = model_forward(model, batch, train=train, engine=engine)
    if not train:
        return logits, None
    return logits, Saved(model._issue_token(), model.version, run)


def backward_pass(model: Model, saved: Saved, grad_logits: np.ndarray) -> dict:
    """Gradients for every trainable tensor (latent weights via the straight-through estimator)."""
    if saved is None:
        raise RuntimeError("backward needs the state saved by a train-mode forward")
    model._consume_token(saved.token, saved.version)
    grads = saved.run.backward(np.asarray(grad_logits, dtype=model.dtype))
    for name, p in model.params.items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return grads


def sgd_step(model: Model, grads: dict, opt: OptimState) -> None:
    """Nesterov momentum SGD; weight decay only on conv/dense weights."""
    for name in model.params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    mu = opt.momentum
    for name, p in model.params.items():
        g = grads[name]
        if model.roles[name] in DECAYED_ROLES and opt.weight_decay:
            g = g + opt.weight_decay * p
        v = opt.velocity.get(name)
        v = g.copy() if v is None else mu * v + g
        opt.velocity[name] = v
        p -= (opt.lr * (g + mu * v)).astype(p.dtype)
    model.mark_updated()


def lr_schedule_step(state: TrainState, opt: OptimState, patience: int = 3, threshold: float = 0.001) -> bool:
    """Divide the learning rate by 10 after ``patience`` epochs without a gain above ``threshold``.

    Accuracies are fractions, so the default threshold is 0.1 percentage points.
    Returns True when the rate was decayed.
    """
    acc = state.acc_history[-1]
    if acc > state.best_acc + threshold:
        state.best_acc = acc
        state.plateau = 0
        return False
    state.plateau += 1
    if state.plateau >= patience:
        opt.lr *= opt.decay
        state.plateau = 0
        return True
    return False


def train_step(model: Model, opt: OptimState, images: np.ndarray, labels: np.ndarray) -> float:
    logits, saved = forward_pass(model, images, "train")
    loss, grad = softmax_cross_entropy(logits, labels)
    grads = backward_pass(model, saved, grad)
    sgd_step(model, grads, opt)
    return loss


def evaluate(model: Model, data: Dataset, batch_size: int = 500, engine: str = "float") -> float:
    """Top-1 accuracy (fraction) on a split, single pass, no augmentation."""
    correct = 0
    for start in range(0, len(data), batch_size):
        logits, _ = forward_pass(model, data.images[start : start + batch_size], "eval", engine)
        correct += int((logits.argmax(axis=1) == data.labels[start : start + batch_size]).sum())
    return correct / max(len(data), 1)


def predict_logits(model: Model, images: np.ndarray, batch_size: int = 500, engine: str = "float") -> np.ndarray:
    out = [forward_pass(model, images[s : s + batch_size], "eval", engine)[0] for s in range(0, len(images), batch_size)]
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Model, opt: OptimState | None = None, state: TrainState | None = None,
                    extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    meta = {"dtype": model.dtype.name}
    if opt is not None:
        tensors.update({f"opt.v/{k}": v for k, v in opt.velocity.items()})
        meta["opt"] = {k: v for k, v in asdict(opt).items() if k != "velocity"}
    if state is not None:
        meta["train_state"] = asdict(state)
    if extra:
        meta.update(extra)
    write_container(path, Container(MAGIC_CHECKPOINT, model.spec.to_dict(), meta, tensors))


def load_checkpoint(path):
    """Returns ``(model, opt, state)``; ``opt``/``state`` are None when absent."""
    box = read_container(path, MAGIC_CHECKPOINT)
    spec = spec_from_dict(box.spec)
    dtype = np.dtype(box.meta.get("dtype", "float32"))
    model = build_model(spec, seed=0, dtype=dtype)
    model.load_state({k: v for k, v in box.tensors.items() if not k.startswith("opt.")})
    opt = state = None
    if "opt" in box.meta:
        vel = {k[len("opt.v/"):]: v.astype(dtype) for k, v in box.tensors.items() if k.startswith("opt.v/")}
        opt = OptimState(velocity=vel, **box.meta["opt"])
    if "train_state" in box.meta:
        state = TrainState(**box.meta["train_state"])
    return model, opt, state


def init_from_checkpoint(model: Model, path) -> None:
    """Copy matching tensors (e.g. a full-precision pretrain) into a model of the same topology."""
    box = read_container(path, MAGIC_CHECKPOINT)
    tensors = {k: v for k, v in box.tensors.items() if not k.startswith("opt.")}
    missing = [n for n in model.roles if n not in tensors]
    if missing:
        raise KeyError(f"{path}: init checkpoint lacks {missing[:3]}{'...' if len(missing) > 3 else ''}")
    model.load_state(tensors)


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


@dataclass
class FitConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float | None = None  # default: 0.05 for k > 1, 0.001 for k == 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    patience: int = 3
    seed: int = 0
    augment: str = "none"
    out_dir: str | None = None
    init_checkpoint: str | None = None
    resume: str | None = None
    eval_batch_size: int = 500
    max_steps_per_epoch: int | None = None


def default_lr(k: int) -> float:
    return 0.001 if k == 1 else 0.05


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def run_epoch(model: Model, opt: OptimState, data: Dataset, cfg: FitConfig, epoch: int) -> float:
    rng = _epoch_rng(cfg.seed, epoch)
    order = rng.permutation(len(data))
    losses = []
    steps = 0
    for start in range(0, len(order), cfg.batch_size):
        idx = np.sort(order[start : start + cfg.batch_size])
        images = augment(data.images[idx], cfg.augment, rng)
        losses.append(train_step(model, opt, images, data.labels[idx]))
        steps += 1
        if cfg.max_steps_per_epoch and steps >= cfg.max_steps_per_epoch:
            break
    return float(np.mean(losses))


def fit(model: Model, train: Dataset, test: Dataset, cfg: FitConfig):
    """Train for ``cfg.epochs`` epochs, checkpointing the last and best-validation models.

    Returns ``(TrainState, best checkpoint path or None)``.  With ``out_dir``
    set, ``metrics.csv``, ``last.ckpt`` and ``best.ckpt`` are written there.
    """
    k = model.spec.quant.k
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if cfg.resume:
        model, opt, state = load_checkpoint(cfg.resume)
        if opt is None or state is None:
            raise ValueError(f"{cfg.resume} is not a resumable training checkpoint")
    else:
        if k == 1:
            if not cfg.init_checkpoint:
                raise MissingPretrainError(
                    "1-bit activations need a full-precision pretrain checkpoint (init_checkpoint)"
                )
        if cfg.init_checkpoint:
            init_from_checkpoint(model, cfg.init_checkpoint)
        opt = OptimState(cfg.lr or default_lr(k), momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        state = TrainState(seed=cfg.seed)
    if tuple(train.images.shape[1:]) != model.spec.input_shape:
        raise ValueError(f"dataset images {train.images.shape[1:]} do not match spec input {model.spec.input_shape}")
    best_path = out / "best.ckpt" if out else None
    metrics = out / "metrics.csv" if out else None
    if metrics and not cfg.resume:
        with open(metrics, "w", newline="") as fh:
            csv.writer(fh).writerow(CSV_COLUMNS)
    while state.epoch < cfg.epochs:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        lr_used = opt.lr
        loss = run_epoch(model, opt, train, cfg, epoch)
        acc = evaluate(model, test, cfg.eval_batch_size)
        seconds = time.perf_counter() - t0
        improved = acc > state.best_acc
        state.epoch = epoch
        state.loss_history.append(loss)
        state.acc_history.append(acc)
        state.lr_history.append(lr_used)
        lr_schedule_step(state, opt, cfg.patience)
        log.info("epoch %d lr %.5g loss %.4f top1 %.4f (%.1fs)", epoch, lr_used, loss, acc, seconds)
        if metrics:
            with open(metrics, "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(lr_used), repr(loss), repr(acc), f"{seconds:.3f}"])
        if out:
            save_checkpoint(out / "last.ckpt", model, opt, state)
            if improved:
                save_checkpoint(best_path, model, opt, state)
    return state, best_path
