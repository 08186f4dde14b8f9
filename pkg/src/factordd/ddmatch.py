"""Pluggable distillation objectives and expert-trajectory recording.

The default objective matches training trajectories: from a cached expert
checkpoint, the network is updated ``syn_steps`` times on composed synthetic
batches at the learnable step size alpha = exp(synth_lr_log), and the loss is
the squared parameter distance to the expert checkpoint ``expert_span``
snapshots later, normalized by how far the expert itself moved:

    || phi_syn_end - phi_expert_end ||^2 / || phi_start - phi_expert_end ||^2

Gradients flow through every unrolled update into the bases, the hallucinator
parameters, and synth_lr_log.  The gradient-matching objective compares
layerwise task-gradient directions (1 - cosine) between a real and a composed
batch per class; the distribution-matching objective compares mean embeddings
per class under a freshly sampled random feature network.
"""

import warnings
from dataclasses import dataclass

import torch

from .dataio import ImageDataset
from .errors import DegenerateGridWarning, NumericsError, UsageError
from .factor import FactorizedDataset, compose_pairs
from .nets import ModelParams, ModelSpec, build_model, forward
from .objectives import dsa_augment, task_loss
from .rng import derive_seed, generator

OBJECTIVES = ("trajectory", "gradient", "distribution")

_DEGENERATE_DENOM = 1e-12


@dataclass
class ExpertTrajectory:
    """Checkpoints of a network trained on real data, one per epoch plus init."""

    spec: ModelSpec
    checkpoints: list[ModelParams]
    interval: int  # real-data updates between consecutive checkpoints
    seed: int
    beta: float

    def __post_init__(self):
        if len(self.checkpoints) < 2:
            raise UsageError("a trajectory needs at least 2 checkpoints")


@dataclass
class MatchConfig:
    objective: str = "trajectory"
    syn_steps: int = 5        # synthetic updates per match (N)
    expert_span: int = 1      # expert checkpoints spanned (M)
    max_start: int = 5        # largest start checkpoint index sampled
    inner_batch: int | None = None  # composed images per inner update (None = full grid)
    beta: float = 0.01        # expert recording learning rate
    aug_inner: bool = True    # apply siamese augmentation inside inner updates
    real_per_class: int = 64  # real batch size per class (gradient/distribution)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise UsageError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.syn_steps < 1 or self.expert_span < 1:
            raise UsageError("syn_steps and expert_span must be >= 1")
        if self.max_start < 0:
            raise UsageError("max_start must be >= 0")


def record_expert(spec: ModelSpec, data: ImageDataset, epochs: int, beta: float, seed: int,
                  batch_size: int = 256) -> ExpertTrajectory:
    """Train a fresh model on real data with plain SGD, snapshotting per epoch."""
    if epochs < 1:
        raise UsageError("epochs must be >= 1")
    params = build_model(spec, seed).requires_grad_()
    checkpoints = [params.clone()]
    updates_per_epoch = max(1, -(-len(data) // batch_size))
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=generator("expert", seed, epoch))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            out = forward(params, spec, data.images[idx])
            loss = task_loss(out.logits, data.labels[idx])
            if not torch.isfinite(loss):
                raise NumericsError(
                    f"expert training diverged at epoch {epoch}, step {start // batch_size}: "
                    f"loss={loss.item()}"
                )
            grads = torch.autograd.grad(loss, params.values())
            with torch.no_grad():
                for p, g in zip(params.values(), grads):
                    p.sub_(beta * g)
        checkpoints.append(params.clone())
    return ExpertTrajectory(spec, checkpoints, updates_per_epoch, seed, beta)


def trajectory_ratio(end: ModelParams, start: ModelParams, target: ModelParams) -> torch.Tensor:
    """The normalized squared parameter distance of the matching objective."""
    num = sum(((e - t) ** 2).sum() for e, t in zip(end.values(), target.values()))
    den = sum(((s - t) ** 2).sum() for s, t in zip(start.values(), target.values()))
    if float(den) < _DEGENERATE_DENOM:
        raise NumericsError(
            f"expert segment is degenerate (start-to-target distance {float(den):.3e})"
        )
    return num / den


def _default_ids(fd: FactorizedDataset, basis_ids, hall_ids):
    if basis_ids is None:
        basis_ids = list(range(len(fd.bases)))
    if hall_ids is None:
        hall_ids = list(range(fd.slot_count))
    if not basis_ids or not hall_ids:
        raise UsageError("need at least one basis and one hallucinator slot")
    return list(basis_ids), list(hall_ids)


def _draw_pairs(grid: list[tuple[int, int]], want: int | None, gen: torch.Generator):
    if want is None or want >= len(grid):
        if want is not None and want > len(grid):
            # grid smaller than the requested batch: draw with replacement
            picks = torch.randint(len(grid), (want,), generator=gen)
            return [grid[i] for i in picks.tolist()]
        return grid
    picks = torch.randperm(len(grid), generator=gen)[:want]
    return [grid[i] for i in picks.tolist()]


def trajectory_matching_loss(fd: FactorizedDataset, traj: ExpertTrajectory, cfg: MatchConfig,
                             seed: int, basis_ids=None, hall_ids=None,
                             augment=None) -> torch.Tensor:
    """Unroll synthetic updates from a sampled expert checkpoint and compare."""
    basis_ids, hall_ids = _default_ids(fd, basis_ids, hall_ids)
    last = len(traj.checkpoints) - 1
    if cfg.max_start + cfg.expert_span > last:
        raise UsageError(
            f"trajectory with {last + 1} checkpoints cannot serve "
            f"max_start={cfg.max_start} + span={cfg.expert_span}"
        )
    gen = generator("traj_start", seed)
    t = int(torch.randint(0, cfg.max_start + 1, (), generator=gen))
    dtype = fd.bases[0].pixels.dtype
    start = traj.checkpoints[t].to(dtype).detach()
    target = traj.checkpoints[t + cfg.expert_span].to(dtype).detach()

    alpha = fd.synth_lr
    grid = [(i, s) for i in basis_ids for s in hall_ids]
    # differentiable roots for the unroll; the originals stay as the ratio anchors
    phi = {name: t.detach().requires_grad_(True) for name, t in start.items()}
    for n in range(cfg.syn_steps):
        pairs = _draw_pairs(grid, cfg.inner_batch, generator("traj_pairs", seed, n))
        images, labels = compose_pairs(fd, pairs)
        if augment:
            images = dsa_augment(images, derive_seed(seed, "traj_aug", n), augment)
        out = forward(ModelParams(phi), traj.spec, images)
        loss = task_loss(out.logits, labels)
        grads = torch.autograd.grad(loss, list(phi.values()), create_graph=True)
        phi = {name: p - alpha * g for (name, p), g in zip(phi.items(), grads)}
    return trajectory_ratio(ModelParams(phi), start, target)


def _real_class_batch(data: ImageDataset, label: int, count: int, gen: torch.Generator):
    pool = data.indices_for_class(label)
    if not pool:
        return None
    if len(pool) <= count:
        picked = pool
    else:
        picked = [pool[i] for i in torch.randperm(len(pool), generator=gen)[:count].tolist()]
    return data.images[picked]


def gradient_matching_loss(fd: FactorizedDataset, data: ImageDataset, spec: ModelSpec,
                           params: ModelParams, seed: int, basis_ids=None, hall_ids=None,
                           augment=None, real_per_class: int = 64) -> torch.Tensor:
    """Per class, layerwise (1 - cosine) distance between real and synthetic gradients."""
    basis_ids, hall_ids = _default_ids(fd, basis_ids, hall_ids)
    # the network is a fixed probe; grads are taken w.r.t. local leaf copies
    params = ModelParams({k: v.detach().requires_grad_(True) for k, v in params.items()})
    values = params.values()
    total = fd.synth_lr_log.sum() * 0.0
    for label in sorted({fd.bases[i].label for i in basis_ids}):
        real = _real_class_batch(data, label, real_per_class,
                                 generator("gm_real", seed, label))
        if real is None:
            warnings.warn(f"class {label} absent from real data; skipped",
                          DegenerateGridWarning)
            continue
        real = real.to(fd.bases[0].pixels.dtype)
        pairs = [(i, s) for i in basis_ids if fd.bases[i].label == label for s in hall_ids]
        syn_images, _ = compose_pairs(fd, pairs)
        if augment:
            aug_seed = derive_seed(seed, "gm_aug", label)
            real = dsa_augment(real, aug_seed, augment)
            syn_images = dsa_augment(syn_images, aug_seed, augment)
        labels_real = torch.full((len(real),), label, dtype=torch.long)
        labels_syn = torch.full((len(syn_images),), label, dtype=torch.long)
        g_real = torch.autograd.grad(
            task_loss(forward(params, spec, real).logits, labels_real), values)
        g_syn = torch.autograd.grad(
            task_loss(forward(params, spec, syn_images).logits, labels_syn),
            values, create_graph=True)
        for name, gr, gs in zip(params.names(), g_real, g_syn):
            gr, gs = gr.detach().flatten(), gs.flatten()
            norm_r, norm_s = gr.norm(), gs.norm()
            if float(norm_r) == 0.0 or float(norm_s.detach()) == 0.0:
                warnings.warn(f"zero-norm gradient for layer {name!r}; skipped",
                              DegenerateGridWarning)
                continue
            total = total + (1.0 - (gr * gs).sum() / (norm_r * norm_s))
    return total


def distribution_matching_loss(fd: FactorizedDataset, data: ImageDataset, feature,
                               seed: int, basis_ids=None, hall_ids=None,
                               augment=None, real_per_class: int = 64) -> torch.Tensor:
    """Per class, squared distance between mean real and mean synthetic embeddings.

    ``feature`` is either a (spec, params) pair, whose penultimate activation
    is the embedding, or a callable mapping an image batch to embeddings.
    """
    basis_ids, hall_ids = _default_ids(fd, basis_ids, hall_ids)
    if callable(feature):
        embed = feature
    else:
        spec, params = feature
        embed = lambda images: forward(params, spec, images).penult  # noqa: E731
    total = fd.synth_lr_log.sum() * 0.0
    for label in sorted({fd.bases[i].label for i in basis_ids}):
        real = _real_class_batch(data, label, real_per_class,
                                 generator("dm_real", seed, label))
        if real is None:
            warnings.warn(f"class {label} absent from real data; skipped",
                          DegenerateGridWarning)
            continue
        real = real.to(fd.bases[0].pixels.dtype)
        pairs = [(i, s) for i in basis_ids if fd.bases[i].label == label for s in hall_ids]
        syn_images, _ = compose_pairs(fd, pairs)
        if augment:
            aug_seed = derive_seed(seed, "dm_aug", label)
            real = dsa_augment(real, aug_seed, augment)
            syn_images = dsa_augment(syn_images, aug_seed, augment)
        diff = embed(real).mean(dim=0).detach() - embed(syn_images).mean(dim=0)
        total = total + (diff**2).sum()
    return total


def sample_feature_net(spec: ModelSpec, seed: int,
                       dtype: torch.dtype = torch.float32) -> tuple[ModelSpec, ModelParams]:
    """A freshly initialized random feature network for distribution matching."""
    return spec, build_model(spec, derive_seed(seed, "dm_net"), dtype=dtype)
