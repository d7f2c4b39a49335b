"""Training objectives.

Every loss returns a :class:`LossReport`. Target branches (momentum encoder,
stop-gradient passes, frozen copies) are evaluated under ``torch.no_grad`` so
they can never receive gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch.func import functional_call

from .nnet import EPGNet, Encoder
from .schedules import loss_weight
from .trajectory import TrajectoryPair, ViewPair

PSEUDO_HUBER_FACTOR = 0.00054


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)
    count: int = 0

    def __post_init__(self):
        bad = [k for k, v in self.components.items() if not math.isfinite(v)]
        if bad or not bool(torch.isfinite(self.total).all()):
            raise FloatingPointError(f"non-finite loss (components: {bad or 'total'})")

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), **self.components}


def infonce(q, q_pos, negs, tau):
    """Per-sample infoNCE of ``q`` against one positive and a set of negatives.

    Shapes: ``q, q_pos`` are ``(..., d)``, ``negs`` is ``(..., K, d)`` with
    ``K >= 0``. Inputs are l2-normalized here.
    """
    if not torch.all(torch.as_tensor(tau) > 0):
        raise ValueError("temperature must be positive")
    q = F.normalize(q, dim=-1)
    q_pos = F.normalize(q_pos, dim=-1)
    negs = F.normalize(negs, dim=-1)
    tau = torch.as_tensor(tau, dtype=q.dtype)
    pos = (q * q_pos).sum(-1, keepdim=True)
    neg = torch.einsum("...d,...kd->...k", q, negs)
    logits = torch.cat([pos, neg], dim=-1) / (tau.unsqueeze(-1) if tau.ndim else tau)
    # -log softmax at the positive slot; logsumexp subtracts the max internally
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def batch_infonce(q: torch.Tensor, k: torch.Tensor, tau) -> torch.Tensor:
    """Mean infoNCE with ``k[i]`` as the positive of ``q[i]`` and all other rows of ``k`` as negatives.

    ``tau`` may be a scalar or one temperature per row.
    """
    B = q.shape[0]
    if B < 2:
        raise ValueError("in-batch infoNCE needs at least two samples")
    tau = torch.as_tensor(tau, dtype=q.dtype)
    if not bool((tau > 0).all()):
        raise ValueError("temperature must be positive")
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    logits = q @ k.T
    logits = logits / (tau.reshape(-1, 1) if tau.ndim else tau)
    return F.cross_entropy(logits, torch.arange(B), reduction="mean")


def pretrain_loss(
    online: EPGNet,
    momentum: EPGNet,
    views: ViewPair,
    pair: TrajectoryPair,
    t0,
    tau_contrastive: float,
    tau_consistency,
    target: Encoder | None = None,
    use_consistency: bool = True,
) -> LossReport:
    """Contrastive term on augmented views plus representation consistency on a trajectory pair.

    ``target`` is the encoder used for the stop-gradient branch; it defaults to
    the online encoder itself.
    """
    B = views.y1.shape[0]
    if B < 2:
        raise ValueError("pre-training needs a batch of at least two samples")
    q = online.project(online.encode(views.y1, t0).cls_feature)
    with torch.no_grad():
        k = momentum.project(momentum.encode(views.y2, t0).cls_feature)
    contrastive = batch_infonce(q, k, tau_contrastive)

    if use_consistency:
        z = online.encode(pair.hi.x_t, pair.hi.t).cls_feature
        target = target if target is not None else online.encoder
        with torch.no_grad():
            z_pos = target(pair.lo.x_t, pair.lo.t).cls_feature
        consistency = batch_infonce(z, z_pos, tau_consistency)
    else:
        consistency = contrastive.new_zeros(())
    total = contrastive + consistency
    return LossReport(total, {"contrastive": contrastive.item(), "rep_consistency": consistency.item()}, B)


def diffusion_loss(model: EPGNet, x0, t_hi, t_lo, eps, labels=None) -> LossReport:
    """Weighted x-prediction error ``mean_pixels |f(x0 + t_n eps, t_n) - x0|^2 / (t_n - t_{n-1})``."""
    w = loss_weight(torch.as_tensor(t_hi), torch.as_tensor(t_lo)).to(x0.dtype)
    t_hi = torch.as_tensor(t_hi, dtype=x0.dtype)
    x_t = x0 + _col(t_hi, x0) * eps
    pred = model.denoise(x_t, t_hi, labels)
    per = (pred - x0).pow(2).flatten(1).mean(1)
    loss = (w.expand_as(per) * per).mean()
    return LossReport(loss, {"denoise": loss.item()}, x0.shape[0])


def pseudo_huber(a: torch.Tensor, b: torch.Tensor, c: float | None = None) -> torch.Tensor:
    """Per-sample ``sqrt(|a - b|^2 + c^2) - c``."""
    if c is None:
        c = PSEUDO_HUBER_FACTOR * math.sqrt(a[0].numel())
    sq = (a - b).pow(2).flatten(1).sum(1)
    return torch.sqrt(sq + c * c) - c


def consistency_loss(model: EPGNet, x0, t, r, eps, labels=None, teacher: EPGNet | None = None,
                     return_prediction: bool = False):
    """``d(f(x0 + t eps, t), sg f(x0 + r eps, r)) / (t - r)`` with the pseudo-Huber metric."""
    w = loss_weight(torch.as_tensor(t), torch.as_tensor(r)).to(x0.dtype)
    t = torch.as_tensor(t, dtype=x0.dtype)
    r = torch.as_tensor(r, dtype=x0.dtype)
    teacher = teacher if teacher is not None else model
    with torch.no_grad():
        target = teacher.denoise(x0 + _col(r, x0) * eps, r, labels)
    pred = model.denoise(x0 + _col(t, x0) * eps, t, labels)
    loss = (w.expand(x0.shape[0]) * pseudo_huber(pred, target)).mean()
    report = LossReport(loss, {"consistency": loss.item()}, x0.shape[0])
    return (report, pred) if return_prediction else report


def auxiliary_loss(frozen: Encoder | None, prediction, x0, t_n, t0, tau_aux: float = 0.2) -> LossReport:
    """Contrast frozen-encoder features of the prediction against those of the clean images.

    The frozen encoder always runs unconditionally (null class token).
    """
    if frozen is None:
        raise RuntimeError("auxiliary loss requires the frozen encoder copy")
    # detached parameters: gradient reaches the prediction but never the frozen weights
    detached = {k: v.detach() for k, v in frozen.named_parameters()}
    q = functional_call(frozen, detached, (prediction, t_n)).cls_feature
    with torch.no_grad():
        k = frozen(x0, t0).cls_feature
    loss = batch_infonce(q, k, tau_aux)
    return LossReport(loss, {"auxiliary": loss.item()}, x0.shape[0])


def _col(t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    return t.reshape(-1, *([1] * (x.ndim - 1))) if t.ndim else t
