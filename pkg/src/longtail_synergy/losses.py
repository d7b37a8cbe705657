"""Loss functions: supervised contrastive, LDAM, CESC, MV and the weighted total.

Each loss exists in two forms:

* a numpy function (``scl_loss``, ``ldam_loss``, ...) returning the value and
  closed-form gradients, which is what the tests check against finite
  differences;
* a torch function (``scl_loss_t``, ...) backed by the same kernels through a
  ``torch.autograd.Function``, used by the trainer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from . import _kernels

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # SCL
    lambda_: float = 1.0  # LDAM
    eta: float = 1e-5  # CESC
    mu: float = 1e-6  # MV

    def __post_init__(self):
        for name in ("alpha", "lambda_", "eta", "mu"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


# (alpha, lambda) tuned per dataset / imbalance factor
TUNED_WEIGHTS = {
    ("cifar10-lt", 10): (1.969, 0.079),
    ("cifar10-lt", 50): (9.764, 2.520),
    ("cifar10-lt", 100): (6.299, 0.709),
    ("cifar100-lt", 10): (8.189, 0.787),
    ("cifar100-lt", 50): (8.819, 0.315),
    ("cifar100-lt", 100): (8.976, 0.472),
}


@dataclass(frozen=True)
class SCLConfig:
    tau: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class MarginTable:
    deltas: tuple[float, ...]
    max_m: float = 0.5
    s: float = 30.0

    def as_array(self) -> np.ndarray:
        return np.asarray(self.deltas, dtype=np.float64)


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _labels(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.int64)


# ---------------------------------------------------------------------------
# numpy API


def scl_loss(embeddings, labels, cfg: SCLConfig = SCLConfig()):
    """Supervised contrastive loss over one batch.

    Anchors without a same-class partner in the batch contribute nothing; the
    sum over the remaining anchors is divided by their count. Returns
    ``(value, d value / d embeddings)``.
    """
    z = _f64(embeddings)
    y = _labels(labels)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("SCL needs a batch of at least 2 embeddings")
    if len(y) != z.shape[0]:
        raise ValueError("labels and embeddings disagree on batch size")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite embedding in SCL input")
    return _kernels.scl_fwd_bwd(z, y, float(cfg.tau))


def ldam_margins(counts, max_m: float = 0.5, s: float = 30.0) -> MarginTable:
    """Per-class margins proportional to n_j^(-1/4), rescaled so the largest is ``max_m``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("counts must be non-empty")
    if np.any(counts < 1):
        raise ValueError("every class count must be >= 1")
    if not max_m > 0 or not s > 0:
        raise ValueError("max_m and s must be > 0")
    raw = counts ** -0.25
    deltas = raw * (max_m / raw.max())
    return MarginTable(tuple(float(d) for d in deltas), float(max_m), float(s))


def _check_ldam(z: np.ndarray, y: np.ndarray, deltas: np.ndarray):
    if z.ndim != 2:
        raise ValueError("logits must be 2-D (batch x classes)")
    if len(deltas) != z.shape[1]:
        raise ValueError(f"{len(deltas)} margins for {z.shape[1]} classes")
    if len(y) != z.shape[0]:
        raise ValueError("labels and logits disagree on batch size")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError("label out of range")


def ldam_loss(logits, labels, margins: MarginTable):
    """Batch-mean LDAM loss on cosine logits: softmax CE of ``s * (z - Δ_y e_y)``."""
    z = _f64(logits)
    y = _labels(labels)
    deltas = margins.as_array()
    _check_ldam(z, y, deltas)
    return _kernels.ldam_fwd_bwd(z, y, deltas, float(margins.s))


def upsample_nearest(centers: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour upsampling of the trailing two axes by an integer factor."""
    h, w = centers.shape[-2:]
    if size[0] % h or size[1] % w:
        raise ValueError(f"cannot upsample centers {h}x{w} to feature map {size[0]}x{size[1]}")
    fh, fw = size[0] // h, size[1] // w
    if fh == 1 and fw == 1:
        return centers
    return np.repeat(np.repeat(centers, fh, axis=-2), fw, axis=-1)


def downsample_sum(grad: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`upsample_nearest`."""
    h, w = size
    fh, fw = grad.shape[-2] // h, grad.shape[-1] // w
    if fh == 1 and fw == 1:
        return grad
    lead = grad.shape[:-2]
    return grad.reshape(*lead, h, fh, w, fw).sum(axis=(-3, -1))


def _bce_terms(pair_probs: np.ndarray, pair_targets: np.ndarray):
    if pair_probs.size == 0:
        return 0.0, np.zeros(0)
    p, t = pair_probs, pair_targets
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("pair probabilities must lie in (0, 1)")
    # an endpoint is accepted only where its target makes the term finite
    if np.any((p == 0) & (t != 0)) or np.any((p == 1) & (t != 1)):
        raise ValueError("pair probability at 0 or 1 against the opposite target")
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = np.where(t > 0, t * np.log(p), 0.0)
        neg = np.where(t < 1, (1 - t) * np.log1p(-p), 0.0)
        dpos = np.where(t > 0, t / p, 0.0)
        dneg = np.where(t < 1, (1 - t) / (1 - p), 0.0)
    value = -np.mean(pos + neg)
    grad = -(dpos - dneg) / p.size
    return float(value), grad


def cesc_loss(feature_maps, labels, centers, gamma, pair_probs, pair_targets, epoch: int, t_th: int):
    """Center-estimation term plus pair-classification BCE.

    ``centers`` holds every class's K centers, shape (classes, K, C, h, w); they
    are upsampled to the feature-map resolution. The BCE term is reported in
    the value at every epoch but carries no gradient once ``epoch > t_th``.

    Returns ``(value, grads)`` with grads for ``features``, ``centers``,
    ``gamma`` and ``pair_probs``.
    """
    x = _f64(feature_maps)
    y = _labels(labels)
    c_all = _f64(centers)
    g = _f64(gamma)
    p = _f64(pair_probs).reshape(-1)
    t = _f64(pair_targets).reshape(-1)
    if x.ndim != 4 or c_all.ndim != 5:
        raise ValueError("feature maps must be (B, C, H, W) and centers (classes, K, C, h, w)")
    if g.shape != (x.shape[0], c_all.shape[1]):
        raise ValueError(f"gamma shape {g.shape} does not match (batch, K)")
    if np.any(g < 0) or np.any(np.abs(g.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each gamma row must be a probability vector (sum 1 within 1e-6)")
    if p.shape != t.shape:
        raise ValueError("pair_probs and pair_targets differ in length")

    up = upsample_nearest(c_all, x.shape[-2:])
    if up.shape[2:] != x.shape[1:]:
        raise ValueError(f"upsampled centers {up.shape[2:]} do not match feature maps {x.shape[1:]}")
    b, k = g.shape
    per_sample = np.ascontiguousarray(up[y].reshape(b, k, -1))
    center_val, gx, gc, gg = _kernels.center_fwd_bwd(x.reshape(b, -1), per_sample, g)

    bce_val, gp = _bce_terms(p, t)
    if epoch > t_th:
        gp = np.zeros_like(gp)

    g_up = np.zeros_like(up)
    np.add.at(g_up, y, np.asarray(gc).reshape(b, k, *x.shape[1:]))
    grads = {
        "features": np.asarray(gx).reshape(x.shape),
        "centers": downsample_sum(g_up, c_all.shape[-2:]),
        "gamma": np.asarray(gg),
        "pair_probs": gp,
    }
    return center_val + bce_val, grads


def mv_loss(transformed_fd, rare_fd, freq_fd, pair_probs, eps: float = NORM_EPS):
    """Direction, length and pair terms over the B_n generated samples.

    All displacement inputs are (B_n, C, H, W); vectors are taken along C at
    each spatial position. Returns ``(value, grads)`` with grads for
    ``transformed``, ``rare``, ``freq`` and ``pair_probs``.
    """
    tr = _f64(transformed_fd)
    ra = _f64(rare_fd)
    fr = _f64(freq_fd)
    p = _f64(pair_probs).reshape(-1)
    if tr.shape != ra.shape or tr.shape != fr.shape:
        raise ValueError("MV displacement inputs must share one shape")
    if tr.shape[0] == 0 or tr.ndim != 4:
        raise ValueError("MV needs at least one generated (B_n, C, H, W) sample")
    if p.shape[0] != tr.shape[0]:
        raise ValueError("one pair probability per generated sample expected")
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("pair probabilities must lie in (0, 1]")
    n, c = tr.shape[:2]

    def flat(a):
        return np.ascontiguousarray(a.reshape(n, c, -1))

    t1, t2, g_t, g_r, g_f = _kernels.mv_fwd_bwd(flat(tr), flat(ra), flat(fr), float(eps))
    t3 = float(-np.mean(np.log(p)))
    grads = {
        "transformed": np.asarray(g_t).reshape(tr.shape),
        "rare": np.asarray(g_r).reshape(tr.shape),
        "freq": np.asarray(g_f).reshape(tr.shape),
        "pair_probs": -1.0 / (p * n),
    }
    return t1 + t2 + t3, grads


def total_loss(parts: Mapping[str, object], weights: LossWeights, epoch: int, t_th: int):
    """Weighted sum of the loss parts; MV only counts once generation is active."""
    total = weights.alpha * parts["scl"] + weights.lambda_ * parts["ldam"] + weights.eta * parts["cesc"]
    if epoch > t_th:
        total = total + weights.mu * parts["mv"]
    return total


# ---------------------------------------------------------------------------
# torch wrappers


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float64)


def _like(a, ref: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=ref.dtype, device=ref.device)


class _SCLFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, labels, tau):
        value, grad = scl_loss(_np(z), labels.cpu().numpy(), SCLConfig(tau))
        ctx.save_for_backward(_like(grad, z))
        return z.new_tensor(value)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return g * grad, None, None


class _LDAMFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits, labels, margins):
        value, grad = ldam_loss(_np(logits), labels.cpu().numpy(), margins)
        ctx.save_for_backward(_like(grad, logits))
        return logits.new_tensor(value)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return g * grad, None, None


class _CESCFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, centers, gamma, pair_probs, labels, pair_targets, epoch, t_th):
        value, grads = cesc_loss(
            _np(x), labels.cpu().numpy(), _np(centers), _np(gamma),
            _np(pair_probs), _np(pair_targets), epoch, t_th,
        )
        ctx.save_for_backward(
            _like(grads["features"], x), _like(grads["centers"], centers),
            _like(grads["gamma"], gamma), _like(grads["pair_probs"], pair_probs),
        )
        return x.new_tensor(value)

    @staticmethod
    def backward(ctx, g):
        gx, gc, gg, gp = ctx.saved_tensors
        return g * gx, g * gc, g * gg, g * gp, None, None, None, None


class _MVFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, transformed, rare, freq, pair_probs, eps):
        value, grads = mv_loss(_np(transformed), _np(rare), _np(freq), _np(pair_probs), eps)
        ctx.save_for_backward(
            _like(grads["transformed"], transformed), _like(grads["rare"], rare),
            _like(grads["freq"], freq), _like(grads["pair_probs"], pair_probs),
        )
        return transformed.new_tensor(value)

    @staticmethod
    def backward(ctx, g):
        gt, gr, gf, gp = ctx.saved_tensors
        return g * gt, g * gr, g * gf, g * gp, None


def scl_loss_t(embeddings: torch.Tensor, labels: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    return _SCLFn.apply(embeddings, labels, tau)


def ldam_loss_t(logits: torch.Tensor, labels: torch.Tensor, margins: MarginTable) -> torch.Tensor:
    return _LDAMFn.apply(logits, labels, margins)


def cesc_loss_t(features, centers, gamma, pair_probs, labels, pair_targets, epoch, t_th) -> torch.Tensor:
    return _CESCFn.apply(features, centers, gamma, pair_probs, labels, pair_targets, epoch, t_th)


def mv_loss_t(transformed, rare, freq, pair_probs, eps: float = NORM_EPS) -> torch.Tensor:
    return _MVFn.apply(transformed, rare, freq, pair_probs, eps)
