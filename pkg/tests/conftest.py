import pytest
import torch

from factordd.dataio import ImageDataset, make_blob_dataset
from factordd.ddmatch import MatchConfig
from factordd.distill import DistillConfig
from factordd.factor import init_factorization
from factordd.nets import ModelSpec


@pytest.fixture(scope="session")
def blob_train() -> ImageDataset:
    return make_blob_dataset("train", per_class=60, seed=7)


@pytest.fixture(scope="session")
def blob_test() -> ImageDataset:
    return make_blob_dataset("test", per_class=20, seed=7)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec("convnet", (8, 8, 1), 10, depth=2, width=16)


def toy_distill_config(**overrides) -> DistillConfig:
    fields = dict(
        dataset_id="blobs", bpc=1, iterations=3, seed=0,
        num_hallucinators=2, halls_per_iter=2, hall_depth=1,
        net_depth=2, net_width=16,
        match=MatchConfig(objective="distribution", real_per_class=16),
        eta_h=0.05, eta_b=0.05, use_dsa=False,
    )
    fields.update(overrides)
    return DistillConfig(**fields)


@pytest.fixture
def toy_config() -> DistillConfig:
    return toy_distill_config()


@pytest.fixture
def toy_fd(toy_config, blob_train):
    return init_factorization(toy_config, blob_train, seed=0)


def finite_difference(fn, tensor: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``tensor`` entries.

    Only the probe writes run under ``no_grad``; ``fn`` itself runs with grad
    enabled because some losses use autograd internally.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)

    def poke(value):
        with torch.no_grad():
            flat[i] = value

    for i in range(flat.numel()):
        orig = flat[i].item()
        poke(orig + eps)
        hi = float(fn().detach())
        poke(orig - eps)
        lo = float(fn().detach())
        poke(orig)
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = numeric.abs().max().clamp(min=1e-8)
    return float((analytic - numeric).abs().max() / scale)
