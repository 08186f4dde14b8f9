"""The factorized synthetic dataset: bases, hallucinators, and composition.

A hallucinator maps a basis to a synthetic training image through
encoder -> elementwise affine -> decoder.  The encoder is ``depth``
Conv3x3-ReLU blocks from the image channel count ``c`` to ``feat_channels``;
the affine scale/shift are full feature-map tensors of shape
[h, w, feat_channels]; the decoder mirrors the encoder back to ``c`` channels
with no activation after its last convolution.  With ``depth == 0`` the
encoder and decoder are identities and the affine acts on the input directly,
so scale=1, shift=0 is exactly the identity map.

Bases may be stored smaller than real images (spatial downsample and/or a
single channel); composition bilinearly upsamples and channel-broadcasts them
before the encoder, so one mechanism covers both the reduced-basis and the
grayscale-basis configurations.  Outputs are never clipped: training operates
in whitened space where pixel ranges are unbounded.
"""

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator

import torch
import torch.nn.functional as F

from .dataio import ImageDataset, sample_class_balanced
from .errors import UsageError
from .rng import derive_seed, generator

if TYPE_CHECKING:  # pragma: no cover
    from .distill import DistillConfig


@dataclass
class Basis:
    pixels: torch.Tensor  # [h', w', c']
    label: int

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise UsageError(f"basis pixels must be [h, w, c], got {tuple(self.pixels.shape)}")


@dataclass
class Hallucinator:
    """Parameters of one encoder/affine/decoder transform."""

    enc_weights: list[torch.Tensor]
    enc_biases: list[torch.Tensor]
    sigma: torch.Tensor  # [h, w, feat_channels]
    mu: torch.Tensor
    dec_weights: list[torch.Tensor]
    dec_biases: list[torch.Tensor]
    in_channels: int

    @property
    def depth(self) -> int:
        return len(self.enc_weights)

    @property
    def feat_channels(self) -> int:
        return self.sigma.shape[2]

    @property
    def target_size(self) -> tuple[int, int]:
        return self.sigma.shape[0], self.sigma.shape[1]

    def tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        for i, (wt, b) in enumerate(zip(self.enc_weights, self.enc_biases)):
            yield f"enc_w{i}", wt
            yield f"enc_b{i}", b
        yield "sigma", self.sigma
        yield "mu", self.mu
        for i, (wt, b) in enumerate(zip(self.dec_weights, self.dec_biases)):
            yield f"dec_w{i}", wt
            yield f"dec_b{i}", b

    def parameter_count(self) -> int:
        return sum(t.numel() for _, t in self.tensors())

    def requires_grad_(self, flag: bool = True) -> "Hallucinator":
        for _, t in self.tensors():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "Hallucinator":
        return Hallucinator(
            [w.detach().clone() for w in self.enc_weights],
            [b.detach().clone() for b in self.enc_biases],
            self.sigma.detach().clone(),
            self.mu.detach().clone(),
            [w.detach().clone() for w in self.dec_weights],
            [b.detach().clone() for b in self.dec_biases],
            self.in_channels,
        )


def hallucinator_param_count(depth: int, image_channels: int, feat_channels: int,
                             height: int, width: int) -> int:
    """Closed-form parameter count of one hallucinator (3x3 kernels, biases)."""
    total = 2 * height * width * feat_channels
    enc_path = [image_channels] + [feat_channels] * depth
    dec_path = [feat_channels] * depth + [image_channels]
    for cin, cout in zip(enc_path, enc_path[1:]):
        total += 9 * cin * cout + cout
    for cin, cout in zip(dec_path, dec_path[1:]):
        total += 9 * cin * cout + cout
    return total


def init_hallucinator(depth: int, image_channels: int, feat_channels: int,
                      height: int, width: int, seed: int,
                      dtype: torch.dtype = torch.float32) -> Hallucinator:
    """Seeded random conv stacks around an identity affine (scale 1, shift 0).

    Conv weights are a channel pass-through kernel plus fan-in-scaled noise,
    and biases are uniform in +-1/sqrt(fan_in), so a fresh depth-1
    hallucinator behaves like a noisy conv autoencoder.  Pure-noise zero-bias
    stacks can start with every encoder ReLU dead, which for small channel
    counts is an absorbing zero-gradient state; the pass-through component
    keeps signal flowing from the first step.
    """
    if depth == 0 and feat_channels != image_channels:
        raise UsageError("a depth-0 hallucinator needs feat_channels == image channels")
    gen = generator("hall_init", seed)
    enc_w, enc_b, dec_w, dec_b = [], [], [], []
    enc_path = [image_channels] + [feat_channels] * depth
    dec_path = [feat_channels] * depth + [image_channels]

    def conv_init(cin, cout):
        bound = 1.0 / math.sqrt(9 * cin)
        weight = torch.randn(cout, cin, 3, 3, generator=gen, dtype=dtype) * bound
        for ch in range(min(cin, cout)):
            weight[ch, ch, 1, 1] += 1.0
        bias = (torch.rand(cout, generator=gen, dtype=dtype) * 2 - 1) * bound
        return weight, bias

    for cin, cout in zip(enc_path, enc_path[1:]):
        w, b = conv_init(cin, cout)
        enc_w.append(w)
        enc_b.append(b)
    for cin, cout in zip(dec_path, dec_path[1:]):
        w, b = conv_init(cin, cout)
        dec_w.append(w)
        dec_b.append(b)
    sigma = torch.ones(height, width, feat_channels, dtype=dtype)
    mu = torch.zeros(height, width, feat_channels, dtype=dtype)
    return Hallucinator(enc_w, enc_b, sigma, mu, dec_w, dec_b, image_channels)


def _prep_pixels(pixels: torch.Tensor, target_hw: tuple[int, int], channels: int) -> torch.Tensor:
    """[h', w', c'] -> [channels, H, W] via channel broadcast + bilinear resize."""
    x = pixels.permute(2, 0, 1)
    if x.shape[0] == 1 and channels > 1:
        x = x.expand(channels, -1, -1)
    elif x.shape[0] != channels:
        raise UsageError(f"basis has {x.shape[0]} channels; expected {channels} (or 1)")
    if (x.shape[1], x.shape[2]) != target_hw:
        x = F.interpolate(x[None], size=target_hw, mode="bilinear", align_corners=False)[0]
    return x


def _prep_basis(h: Hallucinator, pixels: torch.Tensor) -> torch.Tensor:
    return _prep_pixels(pixels, h.target_size, h.in_channels)


def basis_images(fd: "FactorizedDataset", basis_ids: list[int]) -> torch.Tensor:
    """Bases rendered at real-image shape [n, h, w, c] (no hallucinator applied).

    Uses the same resize/broadcast path as composition, so with identity
    hallucinators the two routes produce bit-identical pixels.
    """
    h, w, c = fd.image_shape
    stack = [_prep_pixels(fd.bases[i].pixels, (h, w), c) for i in basis_ids]
    return torch.stack(stack).permute(0, 2, 3, 1)


def _run_hallucinator(h: Hallucinator, x: torch.Tensor) -> torch.Tensor:
    """Apply the transform to a prepared batch [n, c, H, W] -> [n, H, W, c]."""
    for wt, b in zip(h.enc_weights, h.enc_biases):
        x = torch.relu(F.conv2d(x, wt, b, padding=1))
    affine = h.sigma.permute(2, 0, 1)[None] * x + h.mu.permute(2, 0, 1)[None]
    x = affine
    for i, (wt, b) in enumerate(zip(h.dec_weights, h.dec_biases)):
        x = F.conv2d(x, wt, b, padding=1)
        if i + 1 < len(h.dec_weights):
            x = torch.relu(x)
    return x.permute(0, 2, 3, 1)


def compose(h: Hallucinator, b: Basis) -> torch.Tensor:
    """Synthesize one image [H, W, c] from a basis; differentiable throughout."""
    x = _prep_basis(h, b.pixels)
    return _run_hallucinator(h, x[None])[0]


@dataclass
class ComposedBatch:
    """A basis-major grid of composed images with index bookkeeping.

    Row ``r = i * n_halls + j`` holds hallucinator slot ``hall_index[r]``
    applied to basis ``basis_index[r]``; its label is that basis's label.
    """

    images: torch.Tensor  # [n_bases * n_halls, h, w, c]
    labels: torch.Tensor
    basis_index: list[int]
    hall_index: list[int]
    n_bases: int
    n_halls: int

    def grid_penult(self, penult: torch.Tensor) -> torch.Tensor:
        """Reshape per-row features [n, d] into the [n_bases, n_halls, d] grid."""
        return penult.reshape(self.n_bases, self.n_halls, -1)

    def grid_labels(self) -> torch.Tensor:
        return self.labels.reshape(self.n_bases, self.n_halls)[:, 0]


@dataclass
class FactorizedDataset:
    """The distilled artifact: hallucinators + labeled bases + learnable step size.

    When ``class_independent`` is set, ``hallucinators`` holds
    ``halls_per_class`` entries per class, grouped class-major; a "slot" then
    addresses the within-class position and the basis label picks the group.
    Otherwise every basis may use every hallucinator and slots are plain
    indices.
    """

    hallucinators: list[Hallucinator]
    bases: list[Basis]
    synth_lr_log: torch.Tensor
    class_independent: bool = False
    halls_per_class: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.hallucinators or not self.bases:
            raise UsageError("a factorization needs at least one hallucinator and one basis")
        shapes = {tuple(b.pixels.shape) for b in self.bases}
        if len(shapes) > 1:
            raise UsageError(f"bases must share one shape, found {sorted(shapes)}")
        if self.class_independent:
            if not self.halls_per_class:
                raise UsageError("class-independent mode needs halls_per_class")
            if len(self.hallucinators) % self.halls_per_class != 0:
                raise UsageError("hallucinator count must be a multiple of halls_per_class")

    @property
    def slot_count(self) -> int:
        return self.halls_per_class if self.class_independent else len(self.hallucinators)

    @property
    def class_count(self) -> int:
        return int(self.meta.get("class_count", max(b.label for b in self.bases) + 1))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        if "image_shape" in self.meta:
            return tuple(self.meta["image_shape"])
        h = self.hallucinators[0]
        return (*h.target_size, h.in_channels)

    def hallucinator_index(self, slot: int, label: int) -> int:
        if not 0 <= slot < self.slot_count:
            raise UsageError(f"hallucinator slot {slot} out of range [0, {self.slot_count})")
        if self.class_independent:
            return label * self.halls_per_class + slot
        return slot

    def hallucinator_for(self, slot: int, label: int) -> Hallucinator:
        return self.hallucinators[self.hallucinator_index(slot, label)]

    def synthetic_tensors(self) -> Iterator[tuple[str, torch.Tensor]]:
        """Canonical (name, tensor) order: hallucinators, bases, step size."""
        for j, h in enumerate(self.hallucinators):
            for name, t in h.tensors():
                yield f"hall_{j}.{name}", t
        for i, b in enumerate(self.bases):
            yield f"basis_{i}", b.pixels
        yield "synth_lr_log", self.synth_lr_log

    def requires_grad_(self, flag: bool = True) -> "FactorizedDataset":
        for _, t in self.synthetic_tensors():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "FactorizedDataset":
        return FactorizedDataset(
            [h.clone() for h in self.hallucinators],
            [Basis(b.pixels.detach().clone(), b.label) for b in self.bases],
            self.synth_lr_log.detach().clone(),
            self.class_independent,
            self.halls_per_class,
            dict(self.meta),
        )

    @property
    def synth_lr(self) -> torch.Tensor:
        return self.synth_lr_log.exp()


def init_factorization(config: "DistillConfig", data: ImageDataset, seed: int,
                       dtype: torch.dtype = torch.float32) -> FactorizedDataset:
    """Bases from class-balanced real samples; randomly seeded hallucinators."""
    h, w, c = data.image_shape
    bh = config.basis_height or h
    bw = config.basis_width or w
    bc = config.basis_channels or c
    feat = config.hall_channels or c
    if bc not in (1, c):
        raise UsageError(f"basis channels must be 1 or {c}, got {bc}")
    if config.bpc < 1:
        raise UsageError("bases per class must be >= 1")
    if config.num_hallucinators < 1:
        raise UsageError("need at least one hallucinator")

    picked = sample_class_balanced(data, config.bpc, derive_seed(seed, "bases"))
    bases = []
    for idx in picked:
        # clone: bases are independent learnables, never views into the dataset
        pixels = data.images[idx].detach().to(dtype).clone()
        if bc == 1 and c > 1:
            pixels = pixels.mean(dim=2, keepdim=True)
        if (bh, bw) != (h, w):
            pixels = F.interpolate(pixels.permute(2, 0, 1)[None], size=(bh, bw),
                                   mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
        bases.append(Basis(pixels.contiguous(), int(data.labels[idx])))

    groups = data.class_count if config.class_independent_halls else 1
    halls = [
        init_hallucinator(config.hall_depth, c, feat, h, w,
                          derive_seed(seed, "hall", j), dtype=dtype)
        for j in range(groups * config.num_hallucinators)
    ]
    synth_lr_log = torch.tensor(math.log(config.synth_lr_init), dtype=dtype)
    meta = {
        "dataset_id": config.dataset_id,
        "image_shape": (h, w, c),
        "class_count": data.class_count,
        "bpc": config.bpc,
        "seed": seed,
    }
    return FactorizedDataset(
        halls, bases, synth_lr_log,
        class_independent=config.class_independent_halls,
        halls_per_class=config.num_hallucinators if config.class_independent_halls else None,
        meta=meta,
    )


def _compose_rows(fd: FactorizedDataset, pairs: list[tuple[int, int]]) -> torch.Tensor:
    """Compose (basis_id, slot) pairs into an image stack, preserving order.

    Rows sharing a hallucinator run as one batch so the work scales with the
    number of distinct hallucinators, not the number of rows.
    """
    outputs: list[torch.Tensor | None] = [None] * len(pairs)
    by_hall: dict[int, list[tuple[int, int]]] = {}
    for row, (i, slot) in enumerate(pairs):
        if not 0 <= i < len(fd.bases):
            raise UsageError(f"basis index {i} out of range [0, {len(fd.bases)})")
        actual = fd.hallucinator_index(slot, fd.bases[i].label)
        by_hall.setdefault(actual, []).append((row, i))
    for actual, members in by_hall.items():
        h = fd.hallucinators[actual]
        stack = torch.stack([_prep_basis(h, fd.bases[i].pixels) for _, i in members])
        composed = _run_hallucinator(h, stack)
        for (row, _), img in zip(members, composed):
            outputs[row] = img
    return torch.stack(outputs)


def compose_pairs(fd: FactorizedDataset, pairs: list[tuple[int, int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Compose arbitrary (basis_id, hallucinator_slot) pairs -> (images, labels)."""
    images = _compose_rows(fd, pairs)
    labels = torch.tensor([fd.bases[i].label for i, _ in pairs], dtype=torch.long)
    return images, labels


def compose_batch(fd: FactorizedDataset, basis_ids: list[int], hall_ids: list[int]) -> ComposedBatch:
    """Compose the full basis x hallucinator-slot grid, basis-major."""
    pairs = [(i, slot) for i in basis_ids for slot in hall_ids]
    images = _compose_rows(fd, pairs)
    labels = torch.tensor([fd.bases[i].label for i, _ in pairs], dtype=torch.long)
    return ComposedBatch(images, labels,
                         basis_index=[i for i, _ in pairs],
                         hall_index=[s for _, s in pairs],
                         n_bases=len(basis_ids), n_halls=len(hall_ids))


@dataclass(frozen=True)
class BudgetReport:
    """Storage accounting for a factorization, in parameters and image-equivalents."""

    per_hallucinator: int
    hallucinator_count: int
    hallucinator_total: int
    basis_count: int
    elements_per_basis: int
    basis_total: int
    extra_scalars: int
    total: int
    image_elements: int
    image_equivalents: float
    matched_ipc: int
    class_count: int
    rounded: bool = False

    def lines(self) -> list[str]:
        return [
            f"hallucinators: {self.hallucinator_count} x {self.per_hallucinator} = {self.hallucinator_total}",
            f"bases: {self.basis_count} x {self.elements_per_basis} = {self.basis_total}",
            f"extra scalars: {self.extra_scalars}",
            f"total parameters: {self.total}",
            f"image equivalents: {self.image_equivalents:.3f} ({self.image_elements} elems/image)",
            f"matched baseline images/class: {self.matched_ipc}",
        ]


def count_parameters(fd: FactorizedDataset) -> BudgetReport:
    """Measure the stored artifact (counts actual tensors, no formulas)."""
    per_hall = fd.hallucinators[0].parameter_count()
    hall_total = sum(h.parameter_count() for h in fd.hallucinators)
    elements = fd.bases[0].pixels.numel()
    basis_total = sum(b.pixels.numel() for b in fd.bases)
    extra = fd.synth_lr_log.numel()
    h, w, c = fd.image_shape
    image_elements = h * w * c
    total = hall_total + basis_total + extra
    classes = fd.class_count
    bpc = len(fd.bases) // classes if classes else len(fd.bases)
    return BudgetReport(
        per_hallucinator=per_hall,
        hallucinator_count=len(fd.hallucinators),
        hallucinator_total=hall_total,
        basis_count=len(fd.bases),
        elements_per_basis=elements,
        basis_total=basis_total,
        extra_scalars=extra,
        total=total,
        image_elements=image_elements,
        image_equivalents=total / image_elements,
        matched_ipc=bpc + 1,
        class_count=classes,
    )
