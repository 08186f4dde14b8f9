"""The outer training loop: synthetic updates alternating with adversary updates.

Each iteration samples a batch of hallucinator slots and bases, composes the
pairwise grid, updates the sampled hallucinators / bases / learnable step
size by descent on ``lambda_dd * L_dd + lambda_cos * L_cos``, then updates
the adversary feature extractor on the same composed (and identically
augmented) batch by descent on ``lambda_con * L_con + lambda_task * L_task``.
The synthetic update always precedes the adversary update within an
iteration, and only the sampled entries move.
"""

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import torch

from .dataio import DATASET_SHAPES, ImageDataset
from .ddmatch import (ExpertTrajectory, MatchConfig, distribution_matching_loss,
                      gradient_matching_loss, trajectory_matching_loss)
from .errors import DegenerateGridWarning, NumericsError, UsageError
from .factor import (BudgetReport, FactorizedDataset, compose_batch, count_parameters,
                     hallucinator_param_count, init_factorization)
from .nets import ModelParams, ModelSpec, build_model, forward
from .objectives import DSA_OPS, LossWeights, adversary_loss, cosine_loss, dsa_augment, synthetic_loss
from .rng import derive_seed, generator


@dataclass
class DistillConfig:
    """Everything a distillation run needs besides the data itself."""

    dataset_id: str
    bpc: int
    iterations: int
    seed: int = 0
    num_hallucinators: int = 5
    halls_per_iter: int = 2
    basis_batch: int | None = None  # None = all bases each iteration
    class_independent_halls: bool = False
    basis_channels: int | None = None  # None = image channels
    basis_height: int | None = None
    basis_width: int | None = None
    hall_depth: int = 1
    hall_channels: int | None = None  # None = image channels
    weights: LossWeights = field(default_factory=LossWeights)
    match: MatchConfig = field(default_factory=MatchConfig)
    eta_h: float = 1.0
    eta_b: float = 1.0
    eta_f: float = 0.001
    eta_alpha: float | None = None  # None = eta_b
    synth_lr_init: float = 0.01
    net_depth: int = 3
    net_width: int = 128
    use_dsa: bool = True
    dsa_policy: tuple = DSA_OPS
    momentum: float = 0.0
    freeze_hallucinators: bool = False

    def __post_init__(self):
        if self.num_hallucinators < 1:
            raise UsageError("need at least one hallucinator")
        if not 1 <= self.halls_per_iter <= self.num_hallucinators:
            raise UsageError("halls_per_iter must be in [1, num_hallucinators]")
        if self.bpc < 1 or self.iterations < 0:
            raise UsageError("bpc must be >= 1 and iterations >= 0")
        for name in ("eta_h", "eta_b", "eta_f", "synth_lr_init"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0")
        if self.synth_lr_init == 0:
            raise UsageError("synth_lr_init must be positive (it is stored as a log)")


@dataclass
class DistillState:
    fd: FactorizedDataset
    adversary: ModelParams
    adversary_spec: ModelSpec
    iteration: int = 0
    metrics: list[dict] = field(default_factory=list)
    velocities: dict = field(default_factory=dict)


def model_spec_for(cfg: DistillConfig, image_shape: tuple[int, int, int],
                   class_count: int) -> ModelSpec:
    return ModelSpec("convnet", tuple(image_shape), class_count,
                     depth=cfg.net_depth, width=cfg.net_width)


def budget_report(cfg: DistillConfig, image_shape=None, class_count=None) -> BudgetReport:
    """Storage accounting straight from the configuration (no artifact needed)."""
    if image_shape is None or class_count is None:
        if cfg.dataset_id not in DATASET_SHAPES:
            raise UsageError(
                f"dataset {cfg.dataset_id!r} has no registered shape; pass image_shape/class_count"
            )
        shape, classes = DATASET_SHAPES[cfg.dataset_id]
        image_shape = image_shape or shape
        class_count = class_count or classes
    h, w, c = image_shape
    feat = cfg.hall_channels or c
    per_hall = hallucinator_param_count(cfg.hall_depth, c, feat, h, w)
    groups = class_count if cfg.class_independent_halls else 1
    hall_count = groups * cfg.num_hallucinators
    bh, bw, bc = cfg.basis_height or h, cfg.basis_width or w, cfg.basis_channels or c
    elements = bh * bw * bc
    basis_count = cfg.bpc * class_count
    total = per_hall * hall_count + elements * basis_count + 1
    image_elements = h * w * c
    return BudgetReport(
        per_hallucinator=per_hall,
        hallucinator_count=hall_count,
        hallucinator_total=per_hall * hall_count,
        basis_count=basis_count,
        elements_per_basis=elements,
        basis_total=elements * basis_count,
        extra_scalars=1,
        total=total,
        image_elements=image_elements,
        image_equivalents=total / image_elements,
        matched_ipc=cfg.bpc + 1,
        class_count=class_count,
    )


def _sampled_synthetic_targets(state: DistillState, cfg: DistillConfig,
                               basis_ids: list[int], hall_ids: list[int]):
    """(key, tensor) pairs that this iteration's synthetic update may move."""
    fd = state.fd
    targets: list[tuple[str, torch.Tensor]] = []
    if not cfg.freeze_hallucinators:
        touched = sorted({
            fd.hallucinator_index(slot, fd.bases[i].label)
            for slot in hall_ids for i in basis_ids
        })
        for j in touched:
            for name, t in fd.hallucinators[j].tensors():
                targets.append((f"hall_{j}.{name}", t))
    for i in basis_ids:
        targets.append((f"basis_{i}", fd.bases[i].pixels))
    if cfg.match.objective == "trajectory":
        targets.append(("synth_lr_log", fd.synth_lr_log))
    return targets


def _apply_updates(state: DistillState, targets, grads, lr_for_key, momentum: float):
    with torch.no_grad():
        for (key, tensor), grad in zip(targets, grads):
            if grad is None:
                continue
            if momentum > 0:
                vel = state.velocities.get(key)
                vel = grad if vel is None else momentum * vel + grad
                state.velocities[key] = vel
                grad = vel
            tensor.sub_(lr_for_key(key) * grad)


def _compute_dd(state: DistillState, cfg: DistillConfig, data: ImageDataset,
                traj: ExpertTrajectory | None, basis_ids, hall_ids, seed: int) -> torch.Tensor:
    policy = cfg.dsa_policy if cfg.use_dsa else None
    objective = cfg.match.objective
    if objective == "trajectory":
        return trajectory_matching_loss(
            state.fd, traj, cfg.match, derive_seed(seed, "dd"), basis_ids, hall_ids,
            augment=policy if cfg.match.aug_inner else None)
    net = build_model(state.adversary_spec, derive_seed(seed, "net"),
                      dtype=state.fd.bases[0].pixels.dtype)
    if objective == "gradient":
        return gradient_matching_loss(
            state.fd, data, state.adversary_spec, net, derive_seed(seed, "dd"),
            basis_ids, hall_ids, augment=policy, real_per_class=cfg.match.real_per_class)
    return distribution_matching_loss(
        state.fd, data, (state.adversary_spec, net), derive_seed(seed, "dd"),
        basis_ids, hall_ids, augment=policy, real_per_class=cfg.match.real_per_class)


def step_synthetic(state: DistillState, cfg: DistillConfig, data: ImageDataset,
                   traj: ExpertTrajectory | None, basis_ids: list[int],
                   hall_ids: list[int], seed: int) -> dict:
    """One descent update of the sampled hallucinators, bases, and step size."""
    fd = state.fd
    dd = _compute_dd(state, cfg, data, traj, basis_ids, hall_ids, seed)
    if len(hall_ids) >= 2 and cfg.weights.lambda_cos != 0:
        batch = compose_batch(fd, basis_ids, hall_ids)
        images = batch.images
        if cfg.use_dsa:
            images = dsa_augment(images, derive_seed(seed, "grid_aug"), cfg.dsa_policy)
        feats = forward(state.adversary, state.adversary_spec, images)
        try:
            cos = cosine_loss(batch.grid_penult(feats.penult))
        except NumericsError as exc:
            # a dead feature row (all-zero after ReLU) carries no diversity
            # signal; skip the term this iteration instead of aborting the run
            warnings.warn(f"cosine term skipped at iteration {state.iteration}: {exc}",
                          DegenerateGridWarning)
            cos = dd.detach() * 0.0
    else:
        cos = dd.detach() * 0.0
    loss = synthetic_loss(dd, cos, cfg.weights)
    if not torch.isfinite(loss.detach()):
        raise NumericsError(f"synthetic loss is non-finite at iteration {state.iteration}")

    targets = _sampled_synthetic_targets(state, cfg, basis_ids, hall_ids)
    grads = torch.autograd.grad(loss, [t for _, t in targets], allow_unused=True)
    eta_alpha = cfg.eta_b if cfg.eta_alpha is None else cfg.eta_alpha

    def lr_for_key(key: str) -> float:
        if key.startswith("hall_"):
            return cfg.eta_h
        if key == "synth_lr_log":
            return eta_alpha
        return cfg.eta_b

    _apply_updates(state, targets, grads, lr_for_key, cfg.momentum)
    return {"l_dd": float(dd.detach()), "l_cos": float(cos.detach()),
            "l_s": float(loss.detach())}


def step_adversary(state: DistillState, cfg: DistillConfig, basis_ids: list[int],
                   hall_ids: list[int], seed: int) -> dict:
    """One descent update of the feature extractor on the same composed batch."""
    with torch.no_grad():
        batch = compose_batch(state.fd, basis_ids, hall_ids)
        images = batch.images
        if cfg.use_dsa:
            images = dsa_augment(images, derive_seed(seed, "grid_aug"), cfg.dsa_policy)
    weights = cfg.weights
    if len(hall_ids) < 2 and weights.lambda_con != 0:
        weights = dataclasses.replace(weights, lambda_con=0.0)
    out = forward(state.adversary, state.adversary_spec, images)
    loss = adversary_loss(batch.grid_penult(out.penult),
                          out.logits.reshape(batch.n_bases, batch.n_halls, -1),
                          batch.grid_labels(), weights)
    if not torch.isfinite(loss.detach()):
        raise NumericsError(f"adversary loss is non-finite at iteration {state.iteration}")
    values = state.adversary.values()
    grads = torch.autograd.grad(loss, values, allow_unused=True)
    with torch.no_grad():
        for key, (p, g) in enumerate(zip(values, grads)):
            if g is None:
                continue
            if cfg.momentum > 0:
                vel = state.velocities.get(("adv", key))
                vel = g if vel is None else cfg.momentum * vel + g
                state.velocities[("adv", key)] = vel
                g = vel
            p.sub_(cfg.eta_f * g)
    return {"l_f": float(loss.detach())}


def _sample_iteration_ids(state: DistillState, cfg: DistillConfig) -> tuple[list[int], list[int]]:
    it = state.iteration
    slot_gen = generator("iter_halls", cfg.seed, it)
    hall_ids = torch.randperm(state.fd.slot_count, generator=slot_gen)[: cfg.halls_per_iter]
    n_bases = len(state.fd.bases)
    if cfg.basis_batch is None or cfg.basis_batch >= n_bases:
        basis_ids = list(range(n_bases))
    else:
        basis_gen = generator("iter_bases", cfg.seed, it)
        basis_ids = torch.randperm(n_bases, generator=basis_gen)[: cfg.basis_batch].tolist()
    return basis_ids, sorted(hall_ids.tolist())


def run_distillation(cfg: DistillConfig, data: ImageDataset,
                     traj: ExpertTrajectory | None = None,
                     log_path=None, checkpoint_path=None,
                     checkpoint_every: int | None = None) -> DistillState:
    """Execute the full alternating loop for ``cfg.iterations`` iterations."""
    if (cfg.match.objective == "trajectory") != (traj is not None):
        raise UsageError("a trajectory is required iff the objective is 'trajectory'")
    fd = init_factorization(cfg, data, cfg.seed).requires_grad_()
    adv_spec = model_spec_for(cfg, data.image_shape, data.class_count)
    adversary = build_model(adv_spec, derive_seed(cfg.seed, "adversary")).requires_grad_()
    state = DistillState(fd=fd, adversary=adversary, adversary_spec=adv_spec)

    from .store import save_checkpoint  # local import: store depends on this module's types

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    last_good = state.fd.clone() if checkpoint_path else None
    try:
        for it in range(cfg.iterations):
            state.iteration = it
            basis_ids, hall_ids = _sample_iteration_ids(state, cfg)
            it_seed = derive_seed(cfg.seed, "iter", it)
            try:
                record = step_synthetic(state, cfg, data, traj, basis_ids, hall_ids, it_seed)
                record.update(step_adversary(state, cfg, basis_ids, hall_ids, it_seed))
            except NumericsError:
                if checkpoint_path and last_good is not None:
                    save_checkpoint(last_good, checkpoint_path)
                raise
            record["iteration"] = it
            record["alpha"] = float(state.fd.synth_lr.detach())
            state.metrics.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            if checkpoint_path:
                last_good = state.fd.clone()
                if checkpoint_every and (it + 1) % checkpoint_every == 0:
                    save_checkpoint(state.fd, checkpoint_path)
        state.iteration = cfg.iterations
        if checkpoint_path:
            save_checkpoint(state.fd, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return state
