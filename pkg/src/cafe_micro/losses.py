"""Contrastive, language-modeling and combined training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ConfigError, ContractError
from .tensor import Tensor

UNIT_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    alpha_lm: float = 1.0
    alpha_con: float = 10.0
    tau: float = 0.07

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.alpha_lm < 0 or self.alpha_con < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.alpha_lm == 0 and self.alpha_con == 0:
            raise ConfigError("alpha_lm and alpha_con cannot both be zero")


def _check_unit_rows(h: Tensor, name: str) -> None:
    if h.ndim != 2:
        raise ArgumentError(f"{name} must be a matrix, got shape {h.shape}")
    norms = np.sqrt((h.data * h.data).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"rows of {name} are not unit-norm (max deviation {np.abs(norms - 1).max():.3g})")


def info_nce(hv: Tensor, ht: Tensor, tau: float = 0.07) -> Tensor:
    """Symmetric in-batch InfoNCE over matched rows of ``hv`` and ``ht``.

    Returns ``-(1/N) * (sum_i log p(t_i | v_i) + sum_i log p(v_i | t_i))`` where each
    conditional is a softmax over the batch of cosine similarities divided by ``tau``.
    """
    if not tau > 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    _check_unit_rows(hv, "hv")
    _check_unit_rows(ht, "ht")
    if hv.shape != ht.shape:
        raise ArgumentError(f"embedding batches differ in shape: {hv.shape} vs {ht.shape}")
    n = hv.shape[0]
    logits = T.scale(hv @ ht.T, 1.0 / tau)
    targets = np.arange(n)
    w = np.full(n, 1.0 / n)
    loss = T.cross_entropy(logits, targets, w) + T.cross_entropy(logits.T, targets, w)
    loss.data = loss.data + 0.0  # -0.0 -> 0.0 when N = 1
    return loss


def lm_nll(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean next-token NLL over masked positions of one sequence.

    ``loss_mask[t]`` selects target ``targets[t]``, predicted by ``logits[t - 1]``.
    Batched input ``(B, L, V)`` averages the per-sequence means.
    """
    targets = np.asarray(targets)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.ndim == 2:
        return lm_nll(logits.reshape(1, *logits.shape), targets[None], mask[None])
    if mask.shape != targets.shape or mask.shape != logits.shape[:-1]:
        raise ArgumentError("logits, targets and mask disagree in shape")
    if mask[:, 0].any():
        raise ArgumentError("position 0 has no preceding context and cannot be a target")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ArgumentError("loss mask selects no positions")
    w = mask[:, 1:] / counts[:, None] / mask.shape[0]
    return T.cross_entropy(logits[:, :-1], targets[:, 1:], w)


def combined(l_lm: Tensor, l_con: Tensor, w: LossWeights) -> Tensor:
    lm, con = T.as_tensor(l_lm), T.as_tensor(l_con)
    if not (np.all(np.isfinite(lm.data)) and np.all(np.isfinite(con.data))):
        raise ArgumentError("loss components must be finite")
    return T.scale(lm, w.alpha_lm) + T.scale(con, w.alpha_con)
