"""Loss stack for counterfactual contrastive training.

Components: the scaled text-audio similarity matrix, the symmetric
contrastive cross-entropy over it, the angle (hinge) loss separating audio
from counterfactual captions, the factual-consistency loss pulling audio
onto factual captions, and their weighted total. Everything runs in float64
torch so analytic gradients are available and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import LossError

#: initial temperature for the learnable log-temperature mode
LEARNABLE_TAU_INIT = 1.0 / 0.07
#: hard upper clamp on the learnable temperature
TAU_MAX = 100.0


@dataclass(frozen=True)
class LossConfig:
    """Weights and scales of the composite objective.

    ``total = w0 * clap * [include_clap_term] + w1 * angle + w2 * factual``.
    The contrastive term is off by default; ``w1``/``w2`` default to the
    1 / 100 combination used throughout the desk-scale configs.
    """

    tau: float = 1.0
    mu: float = 0.2
    w0: float = 1.0
    w1: float = 1.0
    w2: float = 100.0
    include_clap_term: bool = False
    learnable_tau: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise LossError("tau must be positive")
        if self.mu < 0:
            raise LossError("mu must be >= 0")
        if min(self.w0, self.w1, self.w2) < 0:
            raise LossError("loss weights must be >= 0")


@dataclass(frozen=True)
class SimilarityMatrix:
    """Scaled similarity ``C[i, j] = tau * <E_t[i], E_a[j]>``."""

    C: torch.Tensor
    tau: float


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; ``total`` carries the autograd graph."""

    clap: torch.Tensor
    angle: torch.Tensor
    factual: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict[str, float]:
        return {
            "clap": float(self.clap.detach()),
            "angle": float(self.angle.detach()),
            "factual": float(self.factual.detach()),
            "total": float(self.total.detach()),
        }


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise LossError(f"embedding shapes differ: {sorted(shapes)}")
    if tensors[0].dim() != 2:
        raise LossError("embeddings must be (N, d) matrices")


def similarity(E_t: torch.Tensor, E_a: torch.Tensor, tau: float | torch.Tensor) -> SimilarityMatrix:
    """Scaled text-audio similarity matrix: rows are texts, columns are audio."""
    _check_same_shape(E_t, E_a)
    tau_value = float(tau.detach()) if isinstance(tau, torch.Tensor) else float(tau)
    if tau_value <= 0:
        raise LossError("tau must be positive")
    return SimilarityMatrix(C=tau * (E_t @ E_a.T), tau=tau_value)


def clap_loss(
    sim: SimilarityMatrix | torch.Tensor, positive_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Symmetric contrastive cross-entropy with the diagonal as ground truth.

    Averages the text-queries-audio direction (softmax over rows) and the
    audio-queries-text direction (softmax over columns). ``positive_mask``
    marks additional off-diagonal true pairs (e.g. two captions of the same
    clip in one batch); those logits are excluded rather than treated as
    negatives.
    """
    C = sim.C if isinstance(sim, SimilarityMatrix) else sim
    if C.dim() != 2 or C.shape[0] != C.shape[1]:
        raise LossError(f"similarity matrix must be square, got {tuple(C.shape)}")
    n = C.shape[0]
    if positive_mask is not None:
        drop = positive_mask & ~torch.eye(n, dtype=torch.bool, device=C.device)
        C = C.masked_fill(drop, float("-inf"))
    text_term = torch.diagonal(torch.log_softmax(C, dim=1)).mean()
    audio_term = torch.diagonal(torch.log_softmax(C, dim=0)).mean()
    return -0.5 * (text_term + audio_term)


def _unit_rows(E: torch.Tensor) -> torch.Tensor:
    norms = E.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise LossError("zero-norm embedding passed to a cosine loss")
    return E / norms


def angle_loss(
    E_a: torch.Tensor, E_t: torch.Tensor, E_t_cf: torch.Tensor, mu: float
) -> torch.Tensor:
    """Hinge on cosine similarities: audio must be closer to its factual
    caption than to its counterfactual by at least the margin ``mu``.

    Per element: ``max(0, cos(a_i, t*_i) - cos(a_i, t_i) + mu)``. Cosines are
    computed on defensively re-normalized rows, so the value depends only on
    directions; zero vectors are an error, not a silent epsilon. At the hinge
    kink the subgradient is 0 (the inactive branch).
    """
    _check_same_shape(E_a, E_t, E_t_cf)
    if mu < 0:
        raise LossError("mu must be >= 0")
    a = _unit_rows(E_a)
    cos_fact = (a * _unit_rows(E_t)).sum(dim=1)
    cos_cf = (a * _unit_rows(E_t_cf)).sum(dim=1)
    return torch.relu(cos_cf - cos_fact + mu).mean()


def factual_consistency_loss(E_a: torch.Tensor, E_t: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean distance between audio and factual text embeddings."""
    _check_same_shape(E_a, E_t)
    return ((E_a - E_t) ** 2).sum(dim=1).mean()


def total_loss(
    E_a: torch.Tensor,
    E_t: torch.Tensor,
    config: LossConfig,
    E_t_cf: torch.Tensor | None = None,
    tau: float | torch.Tensor | None = None,
    positive_mask: torch.Tensor | None = None,
) -> LossBreakdown:
    """Weighted combination of the loss terms.

    The angle term requires counterfactual embeddings whenever ``w1 > 0``;
    when they are present with ``w1 = 0`` the term is still computed for the
    metrics log but contributes zero gradient. ``tau`` overrides the
    configured scale (used by the learnable-temperature mode).
    """
    if config.w1 > 0 and E_t_cf is None:
        raise LossError("counterfactual embeddings are required when w1 > 0")
    zero = E_a.new_zeros(())
    clap = (
        clap_loss(similarity(E_t, E_a, config.tau if tau is None else tau), positive_mask)
        if config.include_clap_term
        else zero
    )
    angle = angle_loss(E_a, E_t, E_t_cf, config.mu) if E_t_cf is not None else zero
    factual = factual_consistency_loss(E_a, E_t)
    total = (
        (config.w0 * clap if config.include_clap_term else zero)
        + config.w1 * angle
        + config.w2 * factual
    )
    return LossBreakdown(clap=clap, angle=angle, factual=factual, total=total)


def gradient_check(
    fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-6
) -> float:
    """Compare analytic gradients of ``fn`` with central finite differences.

    Perturbs every coordinate of every input and returns the maximum
    relative error ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Inputs are cloned to float64 leaves; ``fn`` must return a scalar.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise LossError("epsilon must lie in [1e-7, 1e-4]")
    leaves = [t.detach().to(torch.float64).clone().requires_grad_(True) for t in inputs]
    value = fn(*leaves)
    if not torch.isfinite(value):
        raise LossError("loss value is not finite")
    grads = torch.autograd.grad(value, leaves)
    for g in grads:
        if not torch.isfinite(g).all():
            raise LossError("analytic gradient is not finite")

    max_err = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, grads):
            flat, gflat = leaf.view(-1), grad.reshape(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + eps
                f_plus = float(fn(*leaves))
                flat[k] = orig - eps
                f_minus = float(fn(*leaves))
                flat[k] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                analytic = float(gflat[k])
                err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                max_err = max(max_err, err)
    return max_err
