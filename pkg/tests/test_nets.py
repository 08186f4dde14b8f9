import pytest
import torch

from factordd.errors import UsageError
from factordd.nets import (ARCHS, ModelParams, ModelSpec, build_model, build_template,
                           forward, param_count, sgd_step)

from conftest import finite_difference, max_rel_err


def convnet_hand_count(depth, width, input_shape, classes):
    """Layer-by-layer arithmetic, independent of the template construction."""
    h, w, c = input_shape
    total, in_ch = 0, c
    for _ in range(depth):
        total += 9 * in_ch * width + width  # 3x3 conv + bias; instance norm has no params
        in_ch = width
        h, w = h // 2, w // 2
    total += width * h * w * classes + classes
    return total


class TestBuildModel:
    def test_same_seed_is_bit_identical(self, tiny_spec):
        a = build_model(tiny_spec, seed=5)
        b = build_model(tiny_spec, seed=5)
        for (na, ta), (nb, tb) in zip(a.items(), b.items()):
            assert na == nb and torch.equal(ta, tb)

    def test_different_seeds_differ(self, tiny_spec):
        a = build_model(tiny_spec, seed=5)
        b = build_model(tiny_spec, seed=6)
        assert any(not torch.equal(ta, tb) for ta, tb in zip(a.values(), b.values()))

    @pytest.mark.parametrize("depth,width,shape,classes", [
        (3, 128, (32, 32, 3), 10),
        (3, 128, (28, 28, 1), 10),
        (2, 16, (8, 8, 1), 10),
        (1, 8, (4, 4, 3), 4),
    ])
    def test_param_count_matches_hand_count(self, depth, width, shape, classes):
        spec = ModelSpec("convnet", shape, classes, depth=depth, width=width)
        assert param_count(spec) == convnet_hand_count(depth, width, shape, classes)
        assert build_model(spec, 0).total_count == param_count(spec)

    @pytest.mark.parametrize("arch", ARCHS)
    def test_all_archs_build_and_run(self, arch):
        spec = ModelSpec(arch, (32, 32, 3), 10)
        params = build_model(spec, 0)
        out = forward(params, spec, torch.randn(2, 32, 32, 3))
        assert out.logits.shape == (2, 10)
        assert torch.isfinite(out.logits).all()

    def test_too_small_input_rejected(self):
        with pytest.raises(UsageError, match="too small"):
            build_template(ModelSpec("convnet", (4, 4, 1), 10, depth=3, width=8))


class TestForward:
    def test_batch_independence(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        images = torch.randn(8, 8, 8, 1, generator=torch.Generator().manual_seed(0))
        full = forward(params, tiny_spec, images).logits
        solo = forward(params, tiny_spec, images[3:4]).logits
        assert (full[3] - solo[0]).abs().max() < 1e-5

    def test_logits_are_linear_head_of_penult(self, tiny_spec):
        params = build_model(tiny_spec, 1)
        out = forward(params, tiny_spec, torch.randn(3, 8, 8, 1))
        w = params.tensors["head.weight"]
        b = params.tensors["head.bias"]
        assert torch.allclose(out.logits, out.penult @ w.T + b, atol=1e-6)

    def test_zero_head_zeroes_logits_only(self, tiny_spec):
        params = build_model(tiny_spec, 2)
        ref = forward(params, tiny_spec, torch.ones(2, 8, 8, 1))
        zeroed = ModelParams(dict(params.tensors))
        zeroed.tensors["head.weight"] = torch.zeros_like(zeroed.tensors["head.weight"])
        zeroed.tensors["head.bias"] = torch.zeros_like(zeroed.tensors["head.bias"])
        out = forward(zeroed, tiny_spec, torch.ones(2, 8, 8, 1))
        assert torch.equal(out.logits, torch.zeros_like(out.logits))
        assert torch.equal(out.penult, ref.penult)

    def test_shape_mismatch_rejected(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        with pytest.raises(UsageError, match="shape"):
            forward(params, tiny_spec, torch.randn(2, 9, 9, 1))

    def test_input_gradient_matches_finite_differences(self):
        spec = ModelSpec("convnet", (4, 4, 3), 4, depth=1, width=6)
        params = build_model(spec, 3, dtype=torch.float64)
        images = torch.randn(2, 4, 4, 3, dtype=torch.float64,
                             generator=torch.Generator().manual_seed(1))
        images.requires_grad_()
        loss = forward(params, spec, images).logits.sum()
        (analytic,) = torch.autograd.grad(loss, images)
        numeric = finite_difference(
            lambda: forward(params, spec, images).logits.sum(), images.detach())
        assert max_rel_err(analytic, numeric) < 1e-4

    def test_parameter_gradient_matches_finite_differences(self):
        spec = ModelSpec("convnet", (4, 4, 1), 3, depth=1, width=4)
        params = build_model(spec, 4, dtype=torch.float64).requires_grad_()
        images = torch.randn(2, 4, 4, 1, dtype=torch.float64,
                             generator=torch.Generator().manual_seed(2))
        target = torch.tensor([0, 2])

        def loss_fn():
            return torch.nn.functional.cross_entropy(
                forward(params, spec, images).logits, target)

        grads = torch.autograd.grad(loss_fn(), params.values())
        name = "features.0.weight"
        numeric = finite_difference(loss_fn, params.tensors[name])
        analytic = grads[params.names().index(name)]
        assert max_rel_err(analytic, numeric) < 1e-4

    def test_grads_flow_to_params_and_inputs_simultaneously(self, tiny_spec):
        params = build_model(tiny_spec, 0).requires_grad_()
        images = torch.randn(2, 8, 8, 1, requires_grad=True)
        loss = forward(params, tiny_spec, images).logits.square().sum()
        grads = torch.autograd.grad(loss, [images, *params.values()])
        assert all(g is not None for g in grads)
        assert grads[0].abs().sum() > 0


class TestSgdStep:
    def test_zero_lr_is_identity(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        grads = build_model(tiny_spec, 1)
        out = sgd_step(params, grads, 0.0)
        for a, b in zip(out.values(), params.values()):
            assert torch.equal(a, b)

    def test_unit_lr_with_self_grads_gives_zero(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        out = sgd_step(params, params, 1.0)
        assert all(torch.equal(t, torch.zeros_like(t)) for t in out.values())

    def test_two_half_steps_equal_one_step(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        grads = build_model(tiny_spec, 1)
        once = sgd_step(params, grads, 0.5)
        twice = sgd_step(sgd_step(params, grads, 0.25), grads, 0.25)
        for a, b in zip(once.values(), twice.values()):
            assert torch.allclose(a, b, atol=1e-7)

    def test_inputs_not_mutated(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        before = params.clone()
        sgd_step(params, params, 0.3)
        for a, b in zip(params.values(), before.values()):
            assert torch.equal(a, b)

    def test_shape_mismatch_rejected(self, tiny_spec):
        params = build_model(tiny_spec, 0)
        bad = ModelParams({k: v[..., :1] for k, v in params.items()})
        with pytest.raises(UsageError):
            sgd_step(params, bad, 0.1)


class TestModelParams:
    def test_flatten_unflatten_round_trip(self, tiny_spec):
        params = build_model(tiny_spec, 9)
        vec = params.flatten()
        assert vec.numel() == params.total_count
        back = params.unflatten(vec)
        for a, b in zip(back.values(), params.values()):
            assert torch.equal(a, b)

    def test_unflatten_wrong_length_rejected(self, tiny_spec):
        params = build_model(tiny_spec, 9)
        with pytest.raises(UsageError):
            params.unflatten(torch.zeros(params.total_count + 1))
