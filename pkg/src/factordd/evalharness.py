"""Downstream training and evaluation of a frozen factorization.

During downstream training the hallucinators act as parameterized online
augmentors: every training sample draws a basis plus a uniformly random
hallucinator slot, is composed on the fly under ``no_grad`` (hallucinator
parameters receive no gradient), and feeds a fresh classifier trained with
SGD (momentum 0.9, cosine-decayed learning rate).  The nominal dataset size
is therefore the number of bases, while the set of distinct reachable images
is bases x hallucinators.

Three RNG streams (model init, batch order, hallucinator draws) are kept
separate so that disabling composition, or composing through identity
hallucinators, reproduces the exact raw-basis training trajectory.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import torch

from .dataio import ImageDataset
from .distill import DistillConfig, run_distillation
from .errors import UsageError
from .factor import (BudgetReport, FactorizedDataset, basis_images, compose_pairs,
                     count_parameters, init_factorization)
from .nets import ModelSpec, build_model, forward
from .objectives import DSA_OPS, LossWeights, contrastive_loss, dsa_augment, task_loss
from .rng import derive_seed, generator


@dataclass
class EvalConfig:
    arch: ModelSpec
    epochs: int = 150
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 256
    online_composition: bool = True
    use_dsa: bool = True
    dsa_policy: tuple = DSA_OPS
    use_con_downstream: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    repeats: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.repeats < 1:
            raise UsageError("repeats must be >= 1")


@dataclass
class EvalResult:
    accuracies: list[float]
    mean: float
    std: float
    arch: str
    budget: BudgetReport
    fd_hash: str
    failed_repeats: int = 0
    method: str = ""


class _RepeatFailed(Exception):
    pass


def _summarize(accs: list[float]) -> tuple[float, float]:
    if not accs:
        return float("nan"), float("nan")
    mean = sum(accs) / len(accs)
    if len(accs) < 2:
        return mean, 0.0
    var = sum((a - mean) ** 2 for a in accs) / (len(accs) - 1)
    return mean, math.sqrt(var)


def accuracy(params, spec: ModelSpec, data: ImageDataset, batch_size: int = 512) -> float:
    hits = 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            images = data.images[start : start + batch_size].to(torch.float32)
            logits = forward(params, spec, images).logits
            hits += int((logits.argmax(dim=1) == data.labels[start : start + batch_size]).sum())
    return hits / len(data)


def _compose_training_batch(fd: FactorizedDataset, base_ids: list[int], cfg: EvalConfig,
                            gen_hall: torch.Generator):
    """Images + labels for one downstream batch, plus an optional feature grid shape."""
    if not cfg.online_composition:
        images = basis_images(fd, base_ids)
        labels = torch.tensor([fd.bases[i].label for i in base_ids], dtype=torch.long)
        return images, labels, None
    if cfg.use_con_downstream and fd.slot_count >= 2:
        # two distinct slots per batch give the contrastive term its pairs
        slots = torch.randperm(fd.slot_count, generator=gen_hall)[:2].tolist()
        pairs = [(i, s) for i in base_ids for s in slots]
        images, labels = compose_pairs(fd, pairs)
        return images, labels, (len(base_ids), 2)
    slots = torch.randint(fd.slot_count, (len(base_ids),), generator=gen_hall).tolist()
    images, labels = compose_pairs(fd, list(zip(base_ids, slots)))
    return images, labels, None


def _train_once(fd: FactorizedDataset, cfg: EvalConfig, test: ImageDataset, repeat: int) -> float:
    params = build_model(cfg.arch, derive_seed(cfg.seed, "eval_model", repeat)).requires_grad_()
    opt = torch.optim.SGD(params.values(), lr=cfg.lr, momentum=cfg.momentum)
    n_bases = len(fd.bases)
    steps_per_epoch = max(1, -(-n_bases // cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch)
    gen_data = generator("eval_data", cfg.seed, repeat)
    gen_hall = generator("eval_hall", cfg.seed, repeat)
    for epoch in range(cfg.epochs):
        order = torch.randperm(n_bases, generator=gen_data).tolist()
        for step in range(steps_per_epoch):
            base_ids = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if not base_ids:
                continue
            with torch.no_grad():
                images, labels, grid = _compose_training_batch(fd, base_ids, cfg, gen_hall)
                if cfg.use_dsa:
                    images = dsa_augment(
                        images, derive_seed(cfg.seed, "eval_aug", repeat, epoch, step),
                        cfg.dsa_policy)
            out = forward(params, cfg.arch, images)
            loss = task_loss(out.logits, labels)
            if grid is not None:
                feats = out.penult.reshape(grid[0], grid[1], -1)
                grid_labels = labels.reshape(grid[0], grid[1])[:, 0]
                loss = loss + cfg.weights.lambda_con * contrastive_loss(
                    feats, grid_labels, cfg.weights)
            if not torch.isfinite(loss):
                raise _RepeatFailed(f"non-finite loss in repeat {repeat}, epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    return accuracy(params.detach(), cfg.arch, test)


def train_downstream(fd: FactorizedDataset, cfg: EvalConfig, test: ImageDataset) -> EvalResult:
    """Train ``cfg.repeats`` fresh classifiers from the frozen artifact."""
    from .store import fd_fingerprint

    if test.image_shape != cfg.arch.input_shape:
        raise UsageError(
            f"test images {test.image_shape} do not match eval arch input {cfg.arch.input_shape}"
        )
    hash_before = fd_fingerprint(fd)
    accs, failed = [], 0
    for repeat in range(cfg.repeats):
        try:
            accs.append(_train_once(fd, cfg, test, repeat))
        except _RepeatFailed:
            failed += 1
    hash_after = fd_fingerprint(fd)
    if hash_after != hash_before:
        raise RuntimeError("evaluation mutated the factorized dataset")
    mean, std = _summarize(accs)
    return EvalResult(accuracies=accs, mean=mean, std=std, arch=cfg.arch.arch,
                      budget=count_parameters(fd), fd_hash=hash_before,
                      failed_repeats=failed)


def cross_architecture_eval(fd: FactorizedDataset, archs: list, cfg: EvalConfig,
                            test: ImageDataset) -> list[EvalResult]:
    """Evaluate the same artifact under several downstream architectures."""
    if not archs:
        raise UsageError("archs must be nonempty")
    results = []
    for arch in archs:
        if isinstance(arch, ModelSpec):
            spec = arch
        elif arch == cfg.arch.arch:
            spec = cfg.arch
        else:
            spec = ModelSpec(arch, cfg.arch.input_shape, cfg.arch.class_count)
        results.append(train_downstream(fd, dataclasses.replace(cfg, arch=spec), test))
    return results


def identity_image_config(dataset_id: str, ipc: int, iterations: int, seed: int,
                          template: DistillConfig | None = None) -> DistillConfig:
    """Config for pure-image distillation: one frozen identity hallucinator."""
    base = template or DistillConfig(dataset_id=dataset_id, bpc=max(ipc, 1),
                                     iterations=iterations, seed=seed)
    return dataclasses.replace(
        base, dataset_id=dataset_id, bpc=max(ipc, 1), iterations=iterations, seed=seed,
        num_hallucinators=1, halls_per_iter=1, hall_depth=0, hall_channels=None,
        basis_channels=None, basis_height=None, basis_width=None,
        class_independent_halls=False, freeze_hallucinators=True)


def baseline_same_budget(data: ImageDataset, test: ImageDataset, cfg: EvalConfig,
                         budget: BudgetReport, mode: str,
                         distill_template: DistillConfig | None = None,
                         iterations: int = 0, dataset_id: str = "",
                         seed: int | None = None) -> EvalResult:
    """Train a parameter-matched baseline: random real images, or the same
    distillation pipeline restricted to plain images."""
    if mode not in ("random_real", "image_distill_stub"):
        raise UsageError(f"unknown baseline mode {mode!r}")
    seed = cfg.seed if seed is None else seed
    per_image = budget.image_elements
    ipc_exact = budget.total / (per_image * data.class_count)
    ipc = int(ipc_exact)
    rounded = ipc != ipc_exact
    if ipc < 1:
        raise UsageError(f"budget of {budget.total} parameters is below one image per class")
    stub_cfg = identity_image_config(dataset_id or budget_dataset_id(budget), ipc,
                                     iterations, seed, distill_template)
    if mode == "random_real" or iterations == 0:
        fd = init_factorization(stub_cfg, data, seed)
    else:
        fd = run_distillation(stub_cfg, data).fd
    result = train_downstream(fd, cfg, test)
    result.method = mode
    result.budget = dataclasses.replace(result.budget, rounded=rounded)
    return result


def budget_dataset_id(budget: BudgetReport) -> str:
    return f"budget_{budget.total}"


def format_result_row(method: str, dataset_id: str, bpc_or_ipc: str, ratio_percent: float,
                      result: EvalResult) -> str:
    """One structured-text row mirroring the comparison-table layout."""
    return "\t".join([
        method, dataset_id, bpc_or_ipc, f"{ratio_percent:.4f}",
        f"{100 * result.mean:.2f}", f"{100 * result.std:.2f}", result.arch,
    ])


RESULT_HEADER = "\t".join(["method", "dataset", "bpc_or_ipc", "ratio_percent",
                           "accuracy_mean", "accuracy_std", "arch"])


def write_results_table(rows: list[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(RESULT_HEADER + "\n")
        for row in rows:
            fh.write(row + "\n")


def parameter_ratio_percent(budget: BudgetReport, train_count: int) -> float:
    """Distilled parameters as a percentage of the raw training set's pixels."""
    return 100.0 * budget.total / (train_count * budget.image_elements)
