"""Differentiable training objectives for the two jointly learned tasks.

Sound side: binary cross entropy over per-node speaking probabilities plus a
KL-style attention loss pulling predicted self-attention toward per-node
fixation proportions. Saliency side: distribution KL plus NSS and CC terms.
NSS and CC are similarities, so by default the combined objective subtracts
them; the literal added-sum variant is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ContractError, DegenerateMapError
from .numerics import Tensor
from .render import region_owner_grid

EPS = 1e-7


@dataclass
class LossWeights:
    """Balance coefficients: attention (gamma1), sound (gamma2), NSS/CC (betas)."""

    gamma1: float = 0.5
    gamma2: float = 1.0
    beta1: float = 0.1
    beta2: float = 1.0

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class AttentionTarget:
    """Per-frame fixation proportions over the N faces plus the visual node."""

    values: np.ndarray  # (T, N+1), rows sum to 1

    def __post_init__(self):
        v = self.values
        if (v < 0).any() or not np.allclose(v.sum(axis=1), 1.0, atol=1e-9):
            raise ContractError("attention target rows must be nonnegative and sum to 1")


def attention_targets(scene):
    """Ground-truth attention: the share of fixations each node's region gets.

    Fixations inside a face box belong to that face (overlaps resolved by
    nearest box center); everything else belongs to the visual node.
    """
    n = scene.face_count
    owner = region_owner_grid(scene.grid, [f.boxes[0] for f in scene.faces])
    rows = []
    for pts in scene.fixations:
        owners = owner[pts[:, 1], pts[:, 0]]
        counts = np.bincount(owners + 1, minlength=n + 1).astype(np.float64)
        counts = np.concatenate([counts[1:], counts[:1]])  # faces..., visual last
        rows.append(counts / counts.sum())
    return AttentionTarget(np.stack(rows))


def bce_loss(probs, labels, eps=EPS):
    """Mean over all (node, frame) slots of -[y log p + (1-y) log(1-p)].

    ``probs`` is a flat tensor of speaking probabilities, clamped into
    [eps, 1-eps] before the logs.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if probs.data.reshape(-1).shape != y.shape:
        raise ContractError(
            f"{probs.data.size} probabilities for {y.size} labels"
        )
    p = nm.clamp(nm.reshape(probs, (-1,)), lo=eps, hi=1.0 - eps)
    term = Tensor(y) * nm.log(p) + Tensor(1.0 - y) * nm.log(1.0 - p)
    return -nm.mean(term)


def att_loss(target, predicted, eps=EPS):
    """Mean over (frame, node) of a_gt * log(a_gt / a_pred), with 0 log 0 = 0.

    ``target`` is an AttentionTarget or (T, K) array; ``predicted`` a (T, K)
    tensor of self-attention values, clamped at ``eps`` inside the log.
    """
    gt = target.values if isinstance(target, AttentionTarget) else np.asarray(target)
    if predicted.shape != gt.shape:
        raise ContractError(
            f"attention shapes differ: predicted {predicted.shape}, target {gt.shape}"
        )
    pos = gt > 0
    const = float((gt[pos] * np.log(gt[pos])).sum())
    cross = nm.sum_(Tensor(gt) * nm.log(nm.clamp(predicted, lo=eps)))
    return (const - cross) * (1.0 / gt.size)


def sound_loss(bce, att, gamma1):
    """Classification loss plus the attention loss at ratio gamma1."""
    return bce + gamma1 * att


def _frame(stack_or_list, t):
    if isinstance(stack_or_list, Tensor):
        return nm.getitem(stack_or_list, t)
    return Tensor(stack_or_list[t])


def _check_normalized(arr, what):
    s = float(arr.sum())
    if abs(s - 1.0) > 1e-6:
        raise ContractError(f"{what} must sum to 1, got {s!r}")


def kl_loss(predicted, target, eps=EPS):
    """Distribution difference (1/T) sum_t sum_x G log(G / S).

    Both maps must be per-frame normalized; the prediction is clamped at
    ``eps`` inside the log, zero-mass target pixels contribute nothing.
    """
    g = np.asarray(target, dtype=np.float64)
    T = g.shape[0]
    if tuple(predicted.shape) != g.shape:
        raise ContractError(
            f"map shapes differ: predicted {tuple(predicted.shape)}, target {g.shape}"
        )
    total = None
    for t in range(T):
        st = _frame(predicted, t)
        gt = g[t]
        _check_normalized(st.data, f"predicted map at frame {t}")
        _check_normalized(gt, f"target map at frame {t}")
        pos = gt > 0
        const = float((gt[pos] * np.log(gt[pos])).sum())
        cross = nm.sum_(Tensor(gt) * nm.log(nm.clamp(st, lo=eps)))
        term = const - cross
        total = term if total is None else total + term
    return total * (1.0 / T)


def _standardize(frame):
    mu = nm.mean(frame)
    centered = frame - mu
    var = nm.mean(centered * centered)
    if var.data == 0.0:
        raise DegenerateMapError("constant map: standardization undefined")
    return centered / nm.sqrt(var)


def nss_frame(frame, points):
    """Sum of the standardized map over the fixation points of one frame."""
    st = frame if isinstance(frame, Tensor) else Tensor(frame)
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ContractError("NSS needs at least one fixation")
    z = _standardize(st)
    w = st.shape[-1]
    flat = pts[:, 1] * w + pts[:, 0]
    return nm.sum_(nm.take_flat(z, flat))


def nss_loss(predicted, fixations):
    """(1/T) sum_t sum_{x in P_t} standardized prediction at x.

    Returned as a reward (higher is better); the combined saliency objective
    subtracts it by default.
    """
    T = len(fixations)
    total = None
    for t in range(T):
        term = nss_frame(_frame(predicted, t), fixations[t])
        total = term if total is None else total + term
    return total * (1.0 / T)


def cc_frame(pred_frame, target_frame):
    """Pearson correlation between one predicted and one target map."""
    st = pred_frame if isinstance(pred_frame, Tensor) else Tensor(pred_frame)
    gt = np.asarray(target_frame, dtype=np.float64)
    g_mu = gt.mean()
    g_var = ((gt - g_mu) ** 2).mean()
    if g_var == 0.0:
        raise DegenerateMapError("constant target map: correlation undefined")
    mu = nm.mean(st)
    centered = st - mu
    var = nm.mean(centered * centered)
    if var.data == 0.0:
        raise DegenerateMapError("constant predicted map: correlation undefined")
    cov = nm.mean(centered * Tensor(gt - g_mu))
    return cov / nm.sqrt(var * g_var)


def cc_loss(predicted, target):
    """(1/T) sum_t Pearson correlation; a reward like NSS."""
    g = np.asarray(target, dtype=np.float64)
    T = g.shape[0]
    total = None
    for t in range(T):
        term = cc_frame(_frame(predicted, t), g[t])
        total = term if total is None else total + term
    return total * (1.0 / T)


def saliency_loss(kl, nss, cc, beta1, beta2, literal_signs=False):
    """Combined saliency objective.

    Default treats NSS and CC as rewards: kl - beta1*nss - beta2*cc. With
    ``literal_signs`` the three terms are simply added.
    """
    if literal_signs:
        return kl + beta1 * nss + beta2 * cc
    return kl - beta1 * nss - beta2 * cc


def total_loss(saliency, sound, gamma2):
    """Overall objective: saliency plus gamma2 times the sound loss."""
    return saliency + gamma2 * sound
