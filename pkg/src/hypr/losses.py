"""Per-timestep classification loss, masking, and prediction modes.

The readout trace is a sequence of membrane potentials u_t (one per
class).  Training uses a per-step cross entropy averaged over the active
steps; steps before ``t0`` (and steps masked out, e.g. outside a recall
window) contribute neither loss nor gradient.  The sum-of-softmax
aggregate is available as a prediction mode only; it is not a valid
training loss here because it has no per-step decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PREDICTION_MODES = ("mean", "sum_softmax", "per_step")


@dataclass(frozen=True)
class LossSpec:
    """Per-timestep cross-entropy configuration.

    ``t0``: number of leading steps excluded from loss and prediction.
    ``mask``: optional (T,) bool array of additionally allowed steps.
    ``per_step_targets``: targets are (B, T) rather than one class per
    sequence.
    """

    n_classes: int
    t0: int = 0
    mask: np.ndarray | None = None
    per_step_targets: bool = False

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.t0 < 0:
            raise ConfigError(f"t0 must be non-negative, got {self.t0}")

    def active_steps(self, total_steps: int) -> np.ndarray:
        if self.t0 >= total_steps:
            raise ConfigError(f"t0 = {self.t0} leaves no active steps of {total_steps}")
        active = np.arange(1, total_steps + 1) > self.t0
        if self.mask is not None:
            if len(self.mask) != total_steps:
                raise ConfigError("loss mask length must equal sequence length")
            active &= np.asarray(self.mask, dtype=bool)
        if not active.any():
            raise ConfigError("loss mask leaves no active steps")
        return active


def softmax(u: np.ndarray) -> np.ndarray:
    shifted = u - np.max(u, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def per_timestep_loss(u: np.ndarray, target: np.ndarray, scale: float = 1.0):
    """Cross entropy of softmax(u) against integer targets, plus gradient.

    ``u``: (..., C); ``target``: (...) int.  Both outputs carry ``scale``
    (normally 1 / number-of-active-steps).
    """
    p = softmax(u)
    idx = np.asarray(target)
    picked = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
    loss = -np.log(np.maximum(picked, 1e-300)) * scale
    grad = p
    np.put_along_axis(grad, idx[..., None], (picked - 1.0)[..., None], axis=-1)
    grad = grad * scale
    return loss, grad


def window_loss(
    spec: LossSpec,
    u_win: np.ndarray,
    targets: np.ndarray,
    t_offset: int,
    total_steps: int,
    out_loss: np.ndarray | None = None,
    out_grad: np.ndarray | None = None,
):
    """Losses and readout gradients for one window of the trace.

    ``u_win``: (B, lam, C); ``targets``: (B,) or (B, T).  Steps are
    numbered globally so masking is window-independent.
    """
    batch, lam, n_c = u_win.shape
    if n_c != spec.n_classes:
        raise ConfigError(f"trace has {n_c} classes, loss expects {spec.n_classes}")
    active = spec.active_steps(total_steps)[t_offset:t_offset + lam]
    scale = 1.0 / int(spec.active_steps(total_steps).sum())
    if spec.per_step_targets:
        tgt = targets[:, t_offset:t_offset + lam]
    else:
        tgt = np.broadcast_to(targets[:, None], (batch, lam))
    loss, grad = per_timestep_loss(u_win, tgt, scale)
    loss = np.where(active[None, :], loss, 0.0)
    grad = np.where(active[None, :, None], grad, 0.0)
    if out_loss is not None:
        out_loss[...] = loss
        loss = out_loss
    if out_grad is not None:
        out_grad[...] = grad
        grad = out_grad
    return loss, grad


def predict(
    trace: np.ndarray,
    mode: str,
    t0: int = 0,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Class decisions from a readout trace (B, T, C).

    ``mean`` and ``sum_softmax`` return one class per sequence;
    ``per_step`` returns (B, T_active) decisions.  Ties break toward the
    lowest class index.
    """
    if mode not in PREDICTION_MODES:
        raise ConfigError(f"unknown prediction mode {mode!r}")
    total = trace.shape[1]
    spec = LossSpec(n_classes=max(trace.shape[2], 2), t0=t0, mask=mask)
    active = spec.active_steps(total)
    window = trace[:, active, :]
    if mode == "mean":
        return np.argmax(window.sum(axis=1), axis=-1)
    if mode == "sum_softmax":
        return np.argmax(softmax(window).sum(axis=1), axis=-1)
    return np.argmax(window, axis=-1)


def accuracy_from_aggregates(
    mode: str,
    sum_u: np.ndarray,
    sum_softmax: np.ndarray,
    per_step_correct: np.ndarray,
    n_active: int,
    targets_seq: np.ndarray | None,
) -> float:
    """Accuracy from streaming aggregates collected during the rollout."""
    if mode == "per_step":
        return float(per_step_correct.sum() / (per_step_correct.shape[0] * n_active))
    agg = sum_u if mode == "mean" else sum_softmax
    pred = np.argmax(agg, axis=-1)
    return float(np.mean(pred == targets_seq))
