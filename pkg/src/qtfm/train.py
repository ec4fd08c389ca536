"""Training: teacher-forced cross entropy, AdaDelta, clipping, averaging.

One optimizer step covers a batch of utterances assembled by a frame budget.
Each utterance runs a full forward/backward (gradients accumulate across the
batch, scaled so the loss is the mean negative log-likelihood per target
token), then gradients are clipped by global norm and applied with AdaDelta.

Checkpoints are snapshotted at each epoch end; the final model is the
elementwise average of the last few snapshots, which also averages any
activation range state the quantization hook collected.
"""

from __future__ import annotations

import contextlib
import dataclasses
from collections import deque

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, snapshot
from .errors import ContractError, TrainingDiverged
from .model import BOS_ID, EOS_ID, N_SPECIAL, PAD_ID, Model
from .tensor import Tensor


def teacher_pair(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decoder input (BOS-led) and shifted targets (EOS-terminated)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1:
        raise ContractError("token sequence must be 1D")
    if tokens.size and tokens.min() < N_SPECIAL:
        raise ContractError("content tokens must not use reserved ids")
    dec_in = np.concatenate(([BOS_ID], tokens))
    targets = np.concatenate((tokens, [EOS_ID]))
    return dec_in, targets


def cross_entropy(logits: Tensor, targets: np.ndarray, normalize: bool = True) -> Tensor:
    """Negative log-likelihood of ``targets`` under softmax(logits).

    Positions whose target is the padding id are excluded.  With
    ``normalize`` the result is the mean over counted positions, otherwise
    the sum (callers that accumulate over a batch rescale themselves).
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ContractError(f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.min() < 0 or targets.max() >= v:
        raise ContractError("target id out of range")
    mask = (targets != PAD_ID).astype(np.float64)
    count = mask.sum()
    if count == 0:
        raise ContractError("all targets are padding")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = (logz - shifted[np.arange(n), targets]) * mask
    denom = count if normalize else 1.0
    data = np.asarray(nll.sum() / denom)

    def grad_fn(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(n), targets] -= 1.0
        return (g * p * (mask / denom)[:, None],)

    return Tensor._from_op(data, (logits,), grad_fn)


def frame_accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of non-padding positions where argmax(logits) hits the target."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = targets != PAD_ID
    if not mask.any():
        raise ContractError("all targets are padding")
    pred = np.asarray(logits).argmax(axis=-1)
    return float((pred[mask] == targets[mask]).mean())


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclasses.dataclass
class AdaDeltaState:
    """Per-parameter running averages of squared gradients and squared updates."""

    acc_grad: dict[str, np.ndarray]
    acc_delta: dict[str, np.ndarray]

    @staticmethod
    def init(params: dict[str, Tensor]) -> "AdaDeltaState":
        return AdaDeltaState(
            acc_grad={n: np.zeros_like(p.data) for n, p in params.items()},
            acc_delta={n: np.zeros_like(p.data) for n, p in params.items()},
        )


def adadelta_step(params: dict[str, Tensor], state: AdaDeltaState,
                  lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6) -> None:
    """Apply one AdaDelta update in place; parameters without grads are skipped."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        eg = state.acc_grad[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        ed = state.acc_delta[name]
        delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        p.data += lr * delta
        ed *= rho
        ed += (1.0 - rho) * delta * delta


def checkpoint_average(checkpoints: list[Checkpoint]) -> Checkpoint:
    """Elementwise mean of parameters and activation ranges across checkpoints.

    All constituents must share the config, parameter names, and range sites.
    """
    if not checkpoints:
        raise ContractError("cannot average zero checkpoints")
    first = checkpoints[0]
    for c in checkpoints[1:]:
        if c.config != first.config:
            raise ContractError("checkpoint configs differ")
        if set(c.params) != set(first.params):
            raise ContractError("checkpoint parameter sets differ")
        if set(c.act_ranges) != set(first.act_ranges):
            raise ContractError("checkpoint range sites differ")
        if c.is_quantized or first.is_quantized:
            raise ContractError("cannot average quantized checkpoints")
    n = len(checkpoints)
    params = {
        name: (sum(c.params[name].astype(np.float64) for c in checkpoints) / n).astype(np.float32)
        for name in first.params
    }
    ranges = {
        site: (sum(c.act_ranges[site][0] for c in checkpoints) / n,
               sum(c.act_ranges[site][1] for c in checkpoints) / n)
        for site in first.act_ranges
    }
    steps = sorted(s for c in checkpoints for s in c.constituents)
    return Checkpoint(config=first.config, step=max(c.step for c in checkpoints),
                      params=params, act_ranges=ranges, calibrated=False,
                      constituents=steps)


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 80
    batch_frames: int = 2000
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    clip_norm: float = 10.0
    seed: int = 0
    average_last: int = 30
    # Step at which activation fake-quantization engages when training with a
    # quantization hook; the plain float loop ignores it.
    act_quant_start: int = 3000

    def __post_init__(self):
        if self.epochs < 1 or self.batch_frames < 1 or self.average_last < 1:
            raise ContractError("epochs, batch_frames, and average_last must be positive")
        if self.act_quant_start < 0:
            raise ContractError("act_quant_start must be non-negative")


@dataclasses.dataclass
class TrainResult:
    checkpoint: Checkpoint                 # average of the last snapshots
    last: Checkpoint                       # final-step snapshot
    snapshots: list[Checkpoint]            # the constituents of the average
    metrics: list[dict]


def _frame_batches(data, budget: int, rng: np.random.Generator):
    order = rng.permutation(len(data))
    batch, frames = [], 0
    for idx in order:
        batch.append(data[idx])
        frames += len(data[idx][0])
        if frames >= budget:
            yield batch
            batch, frames = [], 0
    if batch:
        yield batch


def train_loop(model: Model, data, cfg: TrainConfig, hook=None,
               dev_data=None, on_metrics=None) -> TrainResult:
    """Run the full schedule over ``data`` (list of (features, tokens) pairs).

    ``hook`` is an optional quantization instrument with ``weight``/``act``
    methods applied inside the forward pass, an ``end_step()`` called after
    each optimizer step, and optionally ``range_state()`` queried when
    snapshotting.  Raises TrainingDiverged on a non-finite loss.
    """
    if not data:
        raise ContractError("empty training set")
    params = model.params
    state = AdaDeltaState.init(params)
    rng = np.random.default_rng(cfg.seed)
    metrics: list[dict] = []
    recent: deque[Checkpoint] = deque(maxlen=cfg.average_last)
    step = 0

    def emit(rec: dict) -> None:
        metrics.append(rec)
        if on_metrics is not None:
            on_metrics(rec)

    def ranges() -> dict:
        return dict(hook.range_state()) if hook is not None and hasattr(hook, "range_state") else {}

    for epoch in range(cfg.epochs):
        epoch_nll = epoch_correct = epoch_tokens = 0.0
        for batch in _frame_batches(data, cfg.batch_frames, rng):
            total_tokens = sum(len(u[1]) + 1 for u in batch)
            batch_nll = 0.0
            correct = 0.0
            for u in batch:
                feats, toks = u[0], u[1]
                dec_in, targets = teacher_pair(toks)
                logits = model.forward(feats, dec_in, train=True, rng=rng, hook=hook)
                loss = cross_entropy(logits, targets, normalize=False)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                batch_nll += loss.item()
                correct += frame_accuracy(logits.data, targets) * len(targets)
                (loss * (1.0 / total_tokens)).backward()
            grad_norm = clip_gradients(params, cfg.clip_norm)
            adadelta_step(params, state, cfg.lr, cfg.rho, cfg.eps)
            for p in params.values():
                p.grad = None
            if hook is not None:
                hook.end_step()
            step += 1
            emit({"type": "step", "step": step, "epoch": epoch,
                  "loss": batch_nll / total_tokens,
                  "frame_acc": correct / total_tokens,
                  "grad_norm": grad_norm})
            epoch_nll += batch_nll
            epoch_correct += correct
            epoch_tokens += total_tokens
        rec = {"type": "epoch", "epoch": epoch, "step": step,
               "loss": epoch_nll / epoch_tokens,
               "frame_acc": epoch_correct / epoch_tokens}
        if dev_data:
            rec["dev_frame_acc"] = eval_frame_accuracy(model, dev_data, hook=hook)
        emit(rec)
        recent.append(snapshot(model.config, params, step, act_ranges=ranges()))

    averaged = checkpoint_average(list(recent))
    return TrainResult(checkpoint=averaged, last=recent[-1],
                       snapshots=list(recent), metrics=metrics)


def eval_frame_accuracy(model: Model, data, hook=None) -> float:
    """Teacher-forced token accuracy over a dataset (no dropout, no grads)."""
    if not data:
        raise ContractError("empty evaluation set")
    correct = 0.0
    total = 0
    freeze = hook.frozen() if hasattr(hook, "frozen") else contextlib.nullcontext()
    with freeze, T.no_grad():
        for u in data:
            feats, toks = u[0], u[1]
            dec_in, targets = teacher_pair(toks)
            logits = model.forward(feats, dec_in, hook=hook)
            correct += frame_accuracy(logits.data, targets) * len(targets)
            total += len(targets)
    return correct / total
