"""Training objectives: InfoNCE, mixup contrastive loss, 3D consistency,
adversarial distance with gradient reversal, and the stage-2 composite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

SAME_INSTANCE = "same_instance"
CROSS_INSTANCE = "cross_instance"


@dataclass
class LossReport:
    """Per-step scalar summary of every objective component."""

    info_nce: float = 0.0
    mix_cl: float = 0.0
    loss_3d: float = 0.0
    adv: float = 0.0
    recon: float = 0.0
    total: float = 0.0
    pretext_accuracy: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "info_nce": self.info_nce,
            "mix_cl": self.mix_cl,
            "loss_3d": self.loss_3d,
            "adv": self.adv,
            "recon": self.recon,
            "total": self.total,
            "pretext_acc": self.pretext_accuracy,
        }


@dataclass
class MixSample:
    """Mixing coefficients and virtual-label bookkeeping for one batch.

    ``lam`` holds one Beta(alpha, alpha) draw per sample. In same-instance
    mode both mix partners carry the same virtual label, so the soft target
    collapses to the sample's own positive column. In cross-instance mode the
    partner is ``partner_index[i]`` and the target spreads ``lam`` /
    ``1 - lam`` over the two positive columns of the batch.
    """

    lam: np.ndarray
    alpha: float
    batch_size: int
    partner_index: np.ndarray
    mode: str = SAME_INSTANCE

    def mixed_target(self, n_logits: int, dtype=torch.float32) -> Tensor:
        y = torch.zeros(self.batch_size, n_logits, dtype=dtype)
        if self.mode == SAME_INSTANCE:
            y[:, 0] = 1.0
        else:
            for i in range(self.batch_size):
                lam = float(self.lam[i])
                y[i, i] += lam
                y[i, int(self.partner_index[i])] += 1.0 - lam
        return y


def sample_lambda(alpha: float, rng: np.random.Generator, size=None):
    """Draw mixing coefficients from Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return rng.beta(alpha, alpha, size=size)


def sample_mix(alpha: float, batch_size: int, rng: np.random.Generator, mode: str = SAME_INSTANCE) -> MixSample:
    """One lambda draw and one mix partner per sample."""
    lam = sample_lambda(alpha, rng, size=batch_size)
    partner = rng.integers(0, batch_size, size=batch_size)
    return MixSample(lam=lam, alpha=alpha, batch_size=batch_size, partner_index=partner, mode=mode)


def mix_features(f1_x: Tensor, g_out: Tensor, lam) -> Tensor:
    """Manifold mixup: ``lam * f1_x + (1 - lam) * g_out`` elementwise.

    ``lam`` may be a scalar or a per-sample vector matching the batch dim.
    """
    if f1_x.shape != g_out.shape:
        raise ValueError(f"shape mismatch: {tuple(f1_x.shape)} vs {tuple(g_out.shape)}")
    if not torch.is_tensor(lam):
        lam = f1_x.new_tensor(lam)
    while lam.dim() < f1_x.dim():
        lam = lam.unsqueeze(-1)
    return lam * f1_x + (1.0 - lam) * g_out


def _as_rows(x: Tensor) -> Tensor:
    return x.unsqueeze(0) if x.dim() == 1 else x


def contrastive_logits(query: Tensor, positive_key: Tensor, queue_entries: Tensor, tau: float) -> Tensor:
    """``[own positive | queue]`` similarity logits at temperature tau.

    Row i holds sample i's positive logit in column 0 followed by one column
    per queued negative.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    q = _as_rows(query)
    lpos = (q * _as_rows(positive_key)).sum(-1, keepdim=True)
    if queue_entries.numel() > 0:
        logits = torch.cat([lpos, q @ _as_rows(queue_entries).T], dim=1)
    else:
        logits = lpos
    return logits / tau


def batch_contrastive_logits(query: Tensor, keys: Tensor, queue_entries: Tensor, tau: float) -> Tensor:
    """``[all batch keys | queue]`` logits: column j of the first block is the
    positive for sample j (cross-instance layout)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    q = _as_rows(query)
    logits = q @ _as_rows(keys).T
    if queue_entries.numel() > 0:
        logits = torch.cat([logits, q @ _as_rows(queue_entries).T], dim=1)
    return logits / tau


def _log_softmax_stable(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(dim=1, keepdim=True).values
    return shifted - torch.log(torch.exp(shifted).sum(dim=1, keepdim=True))


def nce_from_logits(logits: Tensor, positive_index: int = 0) -> Tensor:
    """Cross-entropy against a single positive column (batch mean), computed
    with max-subtraction so any common logit shift cancels exactly."""
    return -_log_softmax_stable(logits)[:, positive_index].mean()


def soft_ce_from_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Soft-target cross-entropy (batch mean)."""
    return -(targets * _log_softmax_stable(logits)).sum(dim=1).mean()


def info_nce(query: Tensor, positive_key: Tensor, queue1_entries: Tensor, tau: float) -> Tensor:
    """InfoNCE over one positive and the queued negatives (batch mean)."""
    logits = contrastive_logits(query, positive_key, queue1_entries, tau)
    return nce_from_logits(logits)


def mixup_contrastive_loss(
    mixed_embedding: Tensor,
    positive_key: Tensor,
    queue1_entries: Tensor,
    mix: MixSample,
    tau: float,
) -> Tensor:
    """(N+1)-way soft-target cross-entropy for mixed queries (batch mean).

    Same-instance mode reduces exactly to ``info_nce`` on the mixed
    embedding; cross-instance mode scores against every batch positive and
    targets ``lam * y_i + (1 - lam) * y_r``.
    """
    if mix.mode == SAME_INSTANCE:
        return info_nce(mixed_embedding, positive_key, queue1_entries, tau)
    logits = batch_contrastive_logits(mixed_embedding, positive_key, queue1_entries, tau)
    target = mix.mixed_target(logits.shape[1], dtype=logits.dtype)
    return soft_ce_from_logits(logits, target)


def pretext_accuracy(logits: Tensor, positive_index) -> float:
    """Fraction of rows whose positive column is the arg-max logit."""
    idx = torch.argmax(logits, dim=1)
    if torch.is_tensor(positive_index) or isinstance(positive_index, np.ndarray):
        target = torch.as_tensor(positive_index, device=logits.device)
    else:
        target = torch.full_like(idx, int(positive_index))
    return float((idx == target).float().mean())


def three_d_loss(code: Tensor, queue2_entry: Tensor) -> Tensor:
    """Euclidean distance between world codes (batch mean)."""
    a, b = _as_rows(code), _as_rows(queue2_entry)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {tuple(code.shape)} vs {tuple(queue2_entry.shape)}")
    return torch.linalg.vector_norm(a - b, dim=1).mean()


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def gradient_reversal(x: Tensor, scale: float = 1.0) -> Tensor:
    """Identity forward; multiplies incoming gradients by ``-scale``."""
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    return _GradientReversal.apply(x, scale)


def adversarial_loss(branch_embedding: Tensor, anchor_embedding: Tensor) -> Tensor:
    """Mean distance between generator-branch embeddings and the (gradient
    blocked) main-encoder anchor. Combined with a gradient reversal on the
    generator output, minimizing this ascends it in the generator."""
    a, b = _as_rows(branch_embedding), _as_rows(anchor_embedding)
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b.detach(), dim=1).mean()


def composite_stage2_loss(mix_cl: Tensor, loss_3d: Tensor, adv: Tensor, recon: Tensor, weights) -> Tensor:
    """Weighted sum of the four stage-2 components.

    Raises if any component is non-finite, naming the offender so the
    training step can be rejected with a useful diagnostic.
    """
    parts = {"mix_cl": mix_cl, "loss_3d": loss_3d, "adv": adv, "recon": recon}
    for name, value in parts.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise ValueError(f"non-finite loss component: {name}")
    w = list(weights)
    if len(w) != 4:
        raise ValueError(f"expected 4 loss weights, got {len(w)}")
    return w[0] * mix_cl + w[1] * loss_3d + w[2] * adv + w[3] * recon
