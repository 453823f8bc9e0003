"""Loss, learning-rate schedule, Adam, and the early-stopping training loop."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, LidarNormalizer
from .evaluation import ConfusionState, accumulate, metrics
from .fusion import CLFT
from .geometry import VOID
from .tensor import Tensor, custom_op, no_grad

log = logging.getLogger(__name__)


class AllVoidWarning(UserWarning):
    """Every ground-truth pixel was void; the loss is defined as zero."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    alpha: float = 0.99
    batch: int = 32
    class_weights: tuple[float, ...] | None = None    # None: inverse frequency on the train split
    max_epochs: int = 100
    max_steps: int | None = None
    patience: int = 10
    seed: int = 0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    augment: bool = True
    modality: str = "C+L"
    restore_best: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.class_weights is not None and min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")
        if self.patience < 0 or self.max_epochs < 0:
            raise ValueError("patience and max_epochs must be >= 0")


def weighted_cross_entropy(logits: Tensor, mask: np.ndarray, weights) -> Tensor:
    """Mean over non-void pixels of -w[c] * log softmax(logits)[c].

    ``logits`` is (B, C, H, W) or (C, H, W); ``mask`` holds class codes with
    255 for void.
    """
    x = logits.data
    mask = np.asarray(mask)
    if x.ndim == 3:
        x = x[None]
        mask = mask[None]
    if x.shape[0] != mask.shape[0] or x.shape[2:] != mask.shape[1:]:
        raise ValueError(f"logits {logits.shape} and mask {mask.shape} do not match")
    weights = np.asarray(weights, dtype=float)
    valid = mask != VOID
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("all ground-truth pixels are void", AllVoidWarning, stacklevel=2)
        return custom_op(np.zeros(()), (logits,), lambda g: (np.zeros(logits.shape),))
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    target = np.where(valid, mask, 0).astype(np.int64)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    wpix = np.where(valid, weights[target], 0.0)
    loss = -(wpix * picked).sum() / n_valid

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[:, None],
                          np.take_along_axis(grad, target[:, None], axis=1) - 1.0, axis=1)
        grad *= (wpix / n_valid)[:, None]
        return (grad.reshape(logits.shape) * g,)

    return custom_op(np.asarray(loss), (logits,), backward)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.alpha ** epoch


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    if len(params) != len(state.m):
        raise ValueError("optimizer state does not match the parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ValueError(f"optimizer state shape {m.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def split_indices(n: int, fractions, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = int(round(fractions[1] * n)) if n - n_train > 0 else 0
    n_val = min(n_val, n - n_train)
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def inverse_frequency_weights(masks: np.ndarray, num_classes: int = 3, cap: float = 20.0) -> np.ndarray:
    """1/frequency per class, scaled so the most common class has weight 1, capped at ``cap``."""
    counts = np.bincount(masks[masks != VOID].ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    counts = np.maximum(counts.astype(float), 1.0)
    w = counts.max() / counts
    return np.minimum(w, cap)


def predict(model: CLFT, rgb, lidar, modality: str, batch: int = 16) -> np.ndarray:
    """Argmax class map for every input sample."""
    out = []
    with no_grad():
        n = len(rgb) if rgb is not None else len(lidar)
        for s in range(0, n, batch):
            r = rgb[s:s + batch] if rgb is not None else None
            l = lidar[s:s + batch] if lidar is not None else None
            out.append(model(r, l, modality).data.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_loss(model, rgb, lidar, mask, weights, modality, batch: int = 16) -> float:
    total, count = 0.0, 0
    with no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", AllVoidWarning)
        for s in range(0, len(mask), batch):
            sl = slice(s, s + batch)
            logits = model(rgb[sl] if rgb is not None else None,
                           lidar[sl] if lidar is not None else None, modality)
            n = int((mask[sl] != VOID).sum())
            total += weighted_cross_entropy(logits, mask[sl], weights).item() * n
            count += n
    return total / count if count else 0.0


def confusion(model, dataset: Dataset, idx, normalizer, modality, batch: int = 16) -> ConfusionState:
    rgb, lid, mask = dataset.arrays(idx, normalizer)
    pred = predict(model, rgb, lid, modality, batch)
    state = ConfusionState()
    for p, g in zip(pred, mask):
        state = accumulate(state, p, g)
    return state


@dataclass
class TrainResult:
    log: list[dict]
    best_state: dict
    best_epoch: int
    normalizer: LidarNormalizer
    weights: np.ndarray
    splits: tuple
    steps: int = 0
    config: dict = field(default_factory=dict)

    def log_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def _modality_inputs(modality: str, rgb, lid):
    return (rgb if "C" in modality else None), (lid if modality in ("L", "C+L") else None)


def fit(model: CLFT, dataset: Dataset, cfg: TrainConfig, normalizer: LidarNormalizer | None = None,
        on_epoch=None) -> TrainResult:
    """Epoch loop with seeded shuffling, decayed learning rate and early stopping on validation loss."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    train_idx, val_idx, test_idx = split_indices(len(dataset), cfg.split, cfg.seed)
    if normalizer is None:
        normalizer = LidarNormalizer.fit([dataset.frames[i].planes for i in train_idx])
    rgb, lid, mask = dataset.arrays(train_idx, normalizer)
    weights = (np.asarray(cfg.class_weights, float) if cfg.class_weights is not None
               else inverse_frequency_weights(mask, model.cfg.num_classes))
    has_val = len(val_idx) > 0
    if has_val:
        v_rgb, v_lid, v_mask = dataset.arrays(val_idx, normalizer)
    rng = np.random.default_rng(cfg.seed + 1)
    params = model.parameters()
    opt = AdamState.for_params(params)
    records: list[dict] = []
    best_loss, best_epoch, best_state, stale, steps = np.inf, -1, model.state_dict(), 0, 0
    for epoch in range(cfg.max_epochs):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(train_idx))
        losses = []
        for s in range(0, len(order), cfg.batch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            b = order[s:s + cfg.batch]
            br, bl, bm = rgb[b], lid[b], mask[b]
            if cfg.augment:
                flip = rng.random(len(b)) < 0.5
                br = np.where(flip[:, None, None, None], br[..., ::-1], br)
                bl = np.where(flip[:, None, None, None], bl[..., ::-1], bl)
                bm = np.where(flip[:, None, None], bm[..., ::-1], bm)
            r_in, l_in = _modality_inputs(cfg.modality, br, bl)
            model.zero_grad()
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", AllVoidWarning)
                loss = weighted_cross_entropy(model(r_in, l_in, cfg.modality), bm, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {steps}")
            if loss.requires_grad:
                loss.backward()
            adam_step(params, [p.grad for p in params], opt, lr)
            losses.append(value)
            steps += 1
        if not losses:
            break
        train_loss = float(np.mean(losses))
        rec = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "steps": steps}
        if has_val:
            vr, vl = _modality_inputs(cfg.modality, v_rgb, v_lid)
            val_loss = evaluate_loss(model, vr, vl, v_mask, weights, cfg.modality)
            pred = predict(model, vr, vl, cfg.modality)
            state = ConfusionState()
            for p, g in zip(pred, v_mask):
                state = accumulate(state, p, g)
            m = metrics(state)
            rec["val_loss"] = val_loss
            rec["val_iou"] = {k: m[k]["iou"] for k in ("vehicle", "human")}
        else:
            val_loss = train_loss
            rec["val_loss"] = None
            rec["val_iou"] = None
        records.append(rec)
        log.info("epoch %d lr %.3g train %.4f val %s", epoch, lr, train_loss, rec["val_loss"])
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state, stale = val_loss, epoch, model.state_dict(), 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    if cfg.restore_best and best_epoch >= 0:
        model.load_state_dict(best_state)
    return TrainResult(records, best_state, best_epoch, normalizer, weights,
                       (train_idx, val_idx, test_idx), steps, asdict(cfg))
