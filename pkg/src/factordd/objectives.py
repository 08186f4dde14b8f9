"""Losses of the min-max game plus siamese differentiable augmentation.

Grid conventions: feature tensors are [n_bases, n_halls, dim] where entry
(i, j) comes from hallucinator j applied to basis i.  Both the contrastive
and the cosine losses run over ordered hallucinator pairs (j, k), j != k, and
keep the printed normalization 1 / (n_halls^2 * n_bases) even though only
n_halls * (n_halls - 1) ordered pairs exist, so closed-form oracles and the
implementation agree term for term.

The contrastive term for anchor (i, j) against column k is
``-log( num / sum_u exp(f_ij . f_uk / tau) )`` with ``num`` the anchor's own
entry, or, in supervised mode, the sum of all same-label entries of column k.
Dot products use L2-normalized features unless ``normalize_features`` is off.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateGridWarning, NumericsError, UsageError
from .rng import generator

DSA_OPS = ("flip", "crop-shift", "scale", "rotate", "cutout")

# Transform magnitudes (fractions of image size / absolute bounds), matching
# the usual siamese-augmentation defaults.
DSA_SHIFT_RATIO = 0.125
DSA_SCALE_MAX = 1.2
DSA_ROTATE_DEG = 15.0
DSA_CUTOUT_RATIO = 0.5


@dataclass
class LossWeights:
    lambda_con: float = 0.1
    lambda_task: float = 1.0
    lambda_dd: float = 1.0
    lambda_cos: float = 0.1
    tau: float = 0.5
    supervised_contrastive: bool = True
    normalize_features: bool = True

    def __post_init__(self):
        for name in ("lambda_con", "lambda_task", "lambda_dd", "lambda_cos"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.tau <= 0:
            raise UsageError("tau must be positive")


def _check_grid(penults: torch.Tensor) -> tuple[int, int]:
    if penults.ndim != 3:
        raise UsageError(f"expected [n_bases, n_halls, dim] features, got {tuple(penults.shape)}")
    if not torch.isfinite(penults.detach()).all():
        raise NumericsError("features contain NaN or Inf")
    return penults.shape[0], penults.shape[1]


def contrastive_loss(penults: torch.Tensor, labels: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Mutual-information style alignment of same-basis images across hallucinators."""
    n_bases, n_halls = _check_grid(penults)
    if n_halls < 2:
        warnings.warn("contrastive loss needs >= 2 hallucinators; returning 0",
                      DegenerateGridWarning)
        return penults.sum() * 0.0
    feats = F.normalize(penults, dim=-1) if w.normalize_features else penults
    labels = labels.reshape(-1)
    if labels.numel() != n_bases:
        raise UsageError(f"need one label per basis row ({n_bases}), got {labels.numel()}")
    same_label = labels[:, None] == labels[None, :]
    total = penults.sum() * 0.0
    for j in range(n_halls):
        for k in range(n_halls):
            if j == k:
                continue
            sims = feats[:, j, :] @ feats[:, k, :].T / w.tau  # [anchor i, candidate u]
            log_denom = torch.logsumexp(sims, dim=1)
            if w.supervised_contrastive:
                masked = sims.masked_fill(~same_label, float("-inf"))
                log_num = torch.logsumexp(masked, dim=1)
            else:
                log_num = sims.diagonal()
            total = total + (log_denom - log_num).sum()
    return total / (n_halls * n_halls * n_bases)


def cosine_loss(penults: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity of same-basis feature pairs across hallucinators."""
    n_bases, n_halls = _check_grid(penults)
    if n_halls < 2:
        raise UsageError("cosine loss needs >= 2 hallucinators in the grid")
    norms = penults.norm(dim=-1)
    if (norms == 0).any():
        i, j = [int(v) for v in torch.nonzero(norms == 0)[0]]
        raise NumericsError(f"zero-norm feature for basis row {i}, hallucinator column {j}")
    feats = penults / norms[..., None]
    total = penults.sum() * 0.0
    for j in range(n_halls):
        for k in range(n_halls):
            if j == k:
                continue
            total = total + (feats[:, j, :] * feats[:, k, :]).sum()
    return total / (n_halls * n_halls * n_bases)


def task_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy."""
    if logits.ndim != 2 or logits.shape[0] != labels.reshape(-1).numel():
        raise UsageError(f"logits {tuple(logits.shape)} do not align with {labels.numel()} labels")
    labels = labels.reshape(-1)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise UsageError(f"label outside [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def adversary_loss(penults: torch.Tensor, logits: torch.Tensor, labels: torch.Tensor,
                   w: LossWeights) -> torch.Tensor:
    """Feature-extractor objective: pull same-basis images together + stay on task.

    ``penults``/``logits`` are grid-shaped ([n_bases, n_halls, .]); ``labels``
    are per basis row.
    """
    n_bases, n_halls = _check_grid(penults)
    flat_logits = logits.reshape(n_bases * n_halls, -1)
    flat_labels = labels.reshape(-1).repeat_interleave(n_halls)
    loss = w.lambda_task * task_loss(flat_logits, flat_labels)
    if w.lambda_con > 0:
        loss = loss + w.lambda_con * contrastive_loss(penults, labels, w)
    return loss


def synthetic_loss(dd: torch.Tensor, cos: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Synthetic-side objective: distillation term plus diversity penalty."""
    return w.lambda_dd * dd + w.lambda_cos * cos


# ---------------------------------------------------------------------------
# Differentiable siamese augmentation: one transform, one parameter draw per
# call, applied identically to every image of the batch.  All ops are
# differentiable with respect to pixels.

def flip_images(images: torch.Tensor) -> torch.Tensor:
    return images.flip(dims=(2,))  # horizontal: [n, h, w, c] flips w


def shift_images(images: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Translate by integer offsets with zero padding."""
    n, h, w, c = images.shape
    x = images.permute(0, 3, 1, 2)
    pad_h, pad_w = abs(dy), abs(dx)
    x = F.pad(x, (pad_w, pad_w, pad_h, pad_h))
    top, left = pad_h - dy, pad_w - dx
    x = x[:, :, top : top + h, left : left + w]
    return x.permute(0, 2, 3, 1)


def _warp(images: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    x = images.permute(0, 3, 1, 2)
    grid = F.affine_grid(theta.to(x.dtype).expand(len(x), 2, 3), x.shape, align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.permute(0, 2, 3, 1)


def scale_images(images: torch.Tensor, factor: float) -> torch.Tensor:
    """Zoom content by ``factor`` about the center (zero fill outside)."""
    theta = torch.tensor([[1.0 / factor, 0.0, 0.0], [0.0, 1.0 / factor, 0.0]])
    return _warp(images, theta[None])


def rotate_images(images: torch.Tensor, degrees: float) -> torch.Tensor:
    rad = torch.deg2rad(torch.tensor(float(degrees)))
    cos, sin = torch.cos(rad), torch.sin(rad)
    theta = torch.stack([torch.stack([cos, -sin, torch.zeros(())]),
                         torch.stack([sin, cos, torch.zeros(())])])
    return _warp(images, theta[None])


def cutout_images(images: torch.Tensor, top: int, left: int, size: int) -> torch.Tensor:
    """Zero a size x size square via a multiplicative mask."""
    n, h, w, c = images.shape
    mask = torch.ones(h, w, dtype=images.dtype)
    mask[max(top, 0) : top + size, max(left, 0) : left + size] = 0.0
    return images * mask[None, :, :, None]


def dsa_augment(images: torch.Tensor, seed: int, policy=DSA_OPS) -> torch.Tensor:
    """Pick one op from ``policy`` and apply it with a single parameter draw."""
    policy = tuple(policy)
    for op in policy:
        if op not in DSA_OPS:
            raise UsageError(f"unknown augmentation op {op!r}; allowed: {DSA_OPS}")
    if not policy:
        return images
    if images.ndim != 4:
        raise UsageError(f"expected [n, h, w, c] images, got {tuple(images.shape)}")
    gen = generator("dsa", seed)
    op = policy[int(torch.randint(len(policy), (1,), generator=gen))]
    n, h, w, c = images.shape
    if op == "flip":
        do = bool(torch.rand((), generator=gen) < 0.5)
        return flip_images(images) if do else images
    if op == "crop-shift":
        max_dy, max_dx = int(h * DSA_SHIFT_RATIO), int(w * DSA_SHIFT_RATIO)
        dy = int(torch.randint(-max_dy, max_dy + 1, (), generator=gen))
        dx = int(torch.randint(-max_dx, max_dx + 1, (), generator=gen))
        return shift_images(images, dy, dx)
    if op == "scale":
        lo, hi = 1.0 / DSA_SCALE_MAX, DSA_SCALE_MAX
        factor = lo + (hi - lo) * float(torch.rand((), generator=gen))
        return scale_images(images, factor)
    if op == "rotate":
        degrees = (2 * float(torch.rand((), generator=gen)) - 1) * DSA_ROTATE_DEG
        return rotate_images(images, degrees)
    size = max(1, int(min(h, w) * DSA_CUTOUT_RATIO))
    top = int(torch.randint(0, h - size + 1, (), generator=gen))
    left = int(torch.randint(0, w - size + 1, (), generator=gen))
    return cutout_images(images, top, left, size)
