import copy

import pytest
import torch

from factordd.dataio import make_blob_dataset
from factordd.ddmatch import MatchConfig, record_expert
from factordd.distill import (DistillConfig, DistillState, _sample_iteration_ids, budget_report,
                              model_spec_for, run_distillation, step_adversary, step_synthetic)
from factordd.errors import NumericsError, UsageError
from factordd.factor import init_factorization
from factordd.nets import build_model
from factordd.objectives import LossWeights
from factordd.rng import derive_seed

from conftest import toy_distill_config


def clone_state(state: DistillState) -> DistillState:
    return DistillState(
        fd=state.fd.clone().requires_grad_(),
        adversary=state.adversary.clone().requires_grad_(),
        adversary_spec=state.adversary_spec,
        iteration=state.iteration,
        metrics=list(state.metrics),
        velocities=copy.deepcopy(state.velocities),
    )


def fresh_state(cfg, data) -> DistillState:
    fd = init_factorization(cfg, data, cfg.seed).requires_grad_()
    spec = model_spec_for(cfg, data.image_shape, data.class_count)
    adv = build_model(spec, derive_seed(cfg.seed, "adversary")).requires_grad_()
    return DistillState(fd=fd, adversary=adv, adversary_spec=spec)


def synth_tensors(fd):
    return {name: t.detach().clone() for name, t in fd.synthetic_tensors()}


class TestRunDistillation:
    def test_zero_iterations_equals_initialization(self, blob_train):
        cfg = toy_distill_config(iterations=0)
        state = run_distillation(cfg, blob_train)
        init = init_factorization(cfg, blob_train, cfg.seed)
        for (na, ta), (nb, tb) in zip(state.fd.synthetic_tensors(), init.synthetic_tensors()):
            assert na == nb and torch.equal(ta.detach(), tb)
        assert state.metrics == []

    def test_zero_learning_rates_change_nothing(self, blob_train):
        cfg = toy_distill_config(iterations=4, eta_h=0.0, eta_b=0.0, eta_f=0.0)
        state = run_distillation(cfg, blob_train)
        init = init_factorization(cfg, blob_train, cfg.seed)
        for (_, ta), (_, tb) in zip(state.fd.synthetic_tensors(), init.synthetic_tensors()):
            assert torch.equal(ta.detach(), tb)

    def test_bit_identical_across_runs(self, blob_train):
        cfg = toy_distill_config(iterations=5)
        a = run_distillation(cfg, blob_train)
        b = run_distillation(cfg, blob_train)
        for (_, ta), (_, tb) in zip(a.fd.synthetic_tensors(), b.fd.synthetic_tensors()):
            assert torch.equal(ta.detach(), tb.detach())
        assert a.metrics == b.metrics

    def test_loop_is_synthetic_then_adversary(self, blob_train):
        cfg = toy_distill_config(iterations=1)
        full = run_distillation(cfg, blob_train)

        state = fresh_state(cfg, blob_train)
        basis_ids, hall_ids = _sample_iteration_ids(state, cfg)
        it_seed = derive_seed(cfg.seed, "iter", 0)
        step_synthetic(state, cfg, blob_train, None, basis_ids, hall_ids, it_seed)
        step_adversary(state, cfg, basis_ids, hall_ids, it_seed)

        for (_, ta), (_, tb) in zip(full.fd.synthetic_tensors(), state.fd.synthetic_tensors()):
            assert torch.equal(ta.detach(), tb.detach())
        for ta, tb in zip(full.adversary.values(), state.adversary.values()):
            assert torch.equal(ta.detach(), tb.detach())

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_distribution_objective_reduces_dd(self, seed):
        data = make_blob_dataset("train", per_class=40, seed=21)
        cfg = toy_distill_config(iterations=50, seed=seed, eta_h=0.05, eta_b=0.05)
        state = run_distillation(cfg, data)
        dd = [m["l_dd"] for m in state.metrics]
        assert sum(dd[-10:]) / 10 < sum(dd[:10]) / 10

    def test_trajectory_objective_requires_trajectory(self, blob_train):
        cfg = toy_distill_config(match=MatchConfig(objective="trajectory", max_start=0,
                                                   syn_steps=1))
        with pytest.raises(UsageError, match="trajectory"):
            run_distillation(cfg, blob_train, traj=None)
        with pytest.raises(UsageError, match="trajectory"):
            dist_cfg = toy_distill_config()
            spec = model_spec_for(dist_cfg, blob_train.image_shape, blob_train.class_count)
            traj = record_expert(spec, blob_train, epochs=1, beta=0.05, seed=0)
            run_distillation(dist_cfg, blob_train, traj=traj)

    def test_trajectory_objective_runs_and_learns_alpha(self, blob_train):
        cfg = toy_distill_config(
            iterations=3, eta_h=0.01, eta_b=0.01, eta_alpha=0.1,
            match=MatchConfig(objective="trajectory", syn_steps=2, expert_span=1, max_start=1),
        )
        spec = model_spec_for(cfg, blob_train.image_shape, blob_train.class_count)
        traj = record_expert(spec, blob_train, epochs=2, beta=0.05, seed=0)
        state = run_distillation(cfg, blob_train, traj=traj)
        assert len(state.metrics) == 3
        assert state.metrics[0]["alpha"] != pytest.approx(cfg.synth_lr_init) or \
            float(state.fd.synth_lr_log.detach()) != pytest.approx(
                torch.log(torch.tensor(cfg.synth_lr_init)).item())

    def test_divergence_aborts_and_writes_last_good(self, blob_train, tmp_path):
        path = tmp_path / "last_good.haba"
        cfg = toy_distill_config(iterations=10, eta_b=1e22, eta_h=1e22)
        with pytest.raises(NumericsError):
            run_distillation(cfg, blob_train, checkpoint_path=path)
        assert path.exists()

    def test_metrics_log_lines(self, blob_train, tmp_path):
        import json

        log = tmp_path / "metrics.jsonl"
        cfg = toy_distill_config(iterations=3)
        state = run_distillation(cfg, blob_train, log_path=log)
        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert [rec["iteration"] for rec in lines] == [0, 1, 2]
        for key in ("l_dd", "l_cos", "l_s", "l_f", "alpha"):
            assert key in lines[0]
        assert [m["iteration"] for m in state.metrics] == [0, 1, 2]


class TestStepSynthetic:
    def test_unsampled_entries_bit_identical(self, blob_train):
        cfg = toy_distill_config(num_hallucinators=4, halls_per_iter=2, bpc=2)
        state = fresh_state(cfg, blob_train)
        before = synth_tensors(state.fd)
        basis_ids, hall_ids = [0, 3, 5], [1, 2]
        step_synthetic(state, cfg, blob_train, None, basis_ids, hall_ids, seed=0)
        after = synth_tensors(state.fd)
        for j in range(4):
            prefix = f"hall_{j}."
            same = all(torch.equal(before[k], after[k]) for k in before if k.startswith(prefix))
            assert same == (j not in hall_ids)
        for i in range(len(state.fd.bases)):
            key = f"basis_{i}"
            assert torch.equal(before[key], after[key]) == (i not in basis_ids)

    def test_zero_lr_changes_nothing(self, blob_train):
        cfg = toy_distill_config(eta_h=0.0, eta_b=0.0)
        state = fresh_state(cfg, blob_train)
        before = synth_tensors(state.fd)
        step_synthetic(state, cfg, blob_train, None, [0, 1], [0, 1], seed=0)
        after = synth_tensors(state.fd)
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_descent_direction_with_backtracking(self, blob_train):
        base_cfg = toy_distill_config(eta_h=0.0, eta_b=0.0, use_dsa=False)
        state = fresh_state(base_cfg, blob_train)
        basis_ids, hall_ids = [0, 1, 2], [0, 1]

        def loss_at(st):
            probe = clone_state(st)
            return step_synthetic(probe, base_cfg, blob_train, None,
                                  basis_ids, hall_ids, seed=5)["l_s"]

        start = loss_at(state)
        lr = 0.1
        for _ in range(8):
            trial = clone_state(state)
            cfg = toy_distill_config(eta_h=lr, eta_b=lr, use_dsa=False)
            step_synthetic(trial, cfg, blob_train, None, basis_ids, hall_ids, seed=5)
            if loss_at(trial) < start:
                break
            lr *= 0.5
        else:
            pytest.fail("no step size decreased the synthetic loss")

    def test_frozen_hallucinators_never_move(self, blob_train):
        cfg = toy_distill_config(freeze_hallucinators=True)
        state = fresh_state(cfg, blob_train)
        before = synth_tensors(state.fd)
        step_synthetic(state, cfg, blob_train, None, [0, 1], [0, 1], seed=0)
        after = synth_tensors(state.fd)
        for key in before:
            if key.startswith("hall_"):
                assert torch.equal(before[key], after[key])

    def test_class_independent_gradient_isolation(self, blob_train):
        cfg = toy_distill_config(class_independent_halls=True, num_hallucinators=2,
                                 halls_per_iter=1)
        state = fresh_state(cfg, blob_train)
        before = synth_tensors(state.fd)
        # bases 0..2 belong to classes 0..2 under bpc=1 class-major init
        touched_classes = {state.fd.bases[i].label for i in [0, 1, 2]}
        step_synthetic(state, cfg, blob_train, None, [0, 1, 2], [1], seed=0)
        after = synth_tensors(state.fd)
        for j in range(len(state.fd.hallucinators)):
            cls, slot = divmod(j, 2)
            prefix = f"hall_{j}."
            unchanged = all(torch.equal(before[k], after[k])
                            for k in before if k.startswith(prefix))
            should_move = cls in touched_classes and slot == 1
            assert unchanged == (not should_move)


class TestStepAdversary:
    def test_zero_lr_keeps_adversary(self, blob_train):
        cfg = toy_distill_config(eta_f=0.0)
        state = fresh_state(cfg, blob_train)
        before = [t.detach().clone() for t in state.adversary.values()]
        step_adversary(state, cfg, [0, 1], [0, 1], seed=0)
        assert all(torch.equal(a, b) for a, b in zip(before, state.adversary.values()))

    def test_zero_weights_keep_adversary(self, blob_train):
        cfg = toy_distill_config(weights=LossWeights(lambda_con=0.0, lambda_task=0.0))
        state = fresh_state(cfg, blob_train)
        before = [t.detach().clone() for t in state.adversary.values()]
        step_adversary(state, cfg, [0, 1], [0, 1], seed=0)
        assert all(torch.equal(a, b) for a, b in zip(before, state.adversary.values()))

    def test_descent_direction(self, blob_train):
        eval_cfg = toy_distill_config(eta_f=0.0)
        state = fresh_state(eval_cfg, blob_train)

        def loss_at(st):
            probe = clone_state(st)
            return step_adversary(probe, eval_cfg, [0, 1, 2], [0, 1], seed=3)["l_f"]

        start = loss_at(state)
        lr = 0.01
        for _ in range(8):
            trial = clone_state(state)
            cfg = toy_distill_config(eta_f=lr)
            step_adversary(trial, cfg, [0, 1, 2], [0, 1], seed=3)
            if loss_at(trial) < start:
                break
            lr *= 0.5
        else:
            pytest.fail("no step size decreased the adversary loss")

    def test_single_hall_degrades_gracefully(self, blob_train):
        cfg = toy_distill_config(num_hallucinators=1, halls_per_iter=1)
        state = fresh_state(cfg, blob_train)
        synth = step_synthetic(state, cfg, blob_train, None, [0, 1], [0], seed=0)
        adv = step_adversary(state, cfg, [0, 1], [0], seed=0)
        assert synth["l_cos"] == 0.0
        assert adv["l_f"] > 0  # task term still present


class TestBudgetReport:
    def test_default_hallucinator_budget_on_cifar(self):
        cfg = DistillConfig(dataset_id="cifar10", bpc=9, iterations=0,
                            num_hallucinators=5)
        report = budget_report(cfg)
        assert report.per_hallucinator == 6_312
        assert report.hallucinator_total == 31_560
        assert report.basis_total == 276_480
        assert report.matched_ipc == 10
        assert 2.0 <= report.per_hallucinator / report.image_elements <= 2.1

    def test_minimum_viable_budget(self):
        cfg = DistillConfig(dataset_id="cifar10", bpc=1, iterations=0, num_hallucinators=1,
                            halls_per_iter=1)
        report = budget_report(cfg)
        assert report.hallucinator_count == 1
        assert report.basis_count == 10
        assert report.total == 6_312 + 10 * 3072 + 1

    def test_zero_hallucinators_disallowed(self):
        with pytest.raises(UsageError):
            DistillConfig(dataset_id="cifar10", bpc=1, iterations=0, num_hallucinators=0)

    def test_unknown_dataset_needs_explicit_shape(self):
        cfg = DistillConfig(dataset_id="private", bpc=1, iterations=0)
        with pytest.raises(UsageError, match="shape"):
            budget_report(cfg)
        report = budget_report(cfg, image_shape=(16, 16, 3), class_count=4)
        assert report.image_elements == 768

    def test_downsampled_bases_shrink_budget(self):
        cfg = DistillConfig(dataset_id="cifar10", bpc=4, iterations=0,
                            basis_height=16, basis_width=16, basis_channels=1)
        report = budget_report(cfg)
        assert report.elements_per_basis == 256


class TestConfigValidation:
    def test_halls_per_iter_bounded(self):
        with pytest.raises(UsageError):
            DistillConfig(dataset_id="blobs", bpc=1, iterations=0,
                          num_hallucinators=2, halls_per_iter=3)

    def test_negative_lr_rejected(self):
        with pytest.raises(UsageError):
            DistillConfig(dataset_id="blobs", bpc=1, iterations=0, eta_h=-1.0)

    def test_momentum_run_smoke(self, blob_train):
        cfg = toy_distill_config(iterations=3, momentum=0.9)
        state = run_distillation(cfg, blob_train)
        assert len(state.metrics) == 3
