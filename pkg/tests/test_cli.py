import json
import os

import pytest
import torch

from factordd.cli import main
from factordd.distill import DistillConfig
from factordd.factor import init_factorization
from factordd.store import cached_whitened, load_checkpoint


def run_cli(*argv) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def data_args(workdir):
    return ["--dataset", "blobs", "--data-root", str(workdir / "raw"),
            "--cache-dir", str(workdir / "cache")]


class TestDistillCommand:
    def test_zero_iterations_checkpoint_equals_initialization(self, workdir):
        out = workdir / "run0"
        code = run_cli("distill", *data_args(workdir), "--bpc", "1", "--iterations", "0",
                       "--halls", "2", "--net-depth", "2", "--net-width", "16",
                       "--out", str(out))
        assert code == 0
        fd = load_checkpoint(out / "fd.haba")
        resolved = json.loads((out / "resolved_config.json").read_text())
        # rebuild nested configs from the resolved snapshot
        from factordd.ddmatch import MatchConfig
        from factordd.objectives import LossWeights

        cfg_fields = dict(resolved["config"])
        cfg_fields["weights"] = LossWeights(**cfg_fields["weights"])
        cfg_fields["match"] = MatchConfig(**cfg_fields["match"])
        cfg_fields["dsa_policy"] = tuple(cfg_fields["dsa_policy"])
        cfg = DistillConfig(**cfg_fields)
        train, _test, _stats = cached_whitened("blobs", str(workdir / "raw"),
                                               str(workdir / "cache"))
        init = init_factorization(cfg, train, cfg.seed)
        for (na, ta), (nb, tb) in zip(fd.synthetic_tensors(), init.synthetic_tensors()):
            assert na == nb and torch.equal(ta, tb)

    def test_resolved_config_written(self, workdir):
        out = workdir / "run0"
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["command"] == "distill"
        assert resolved["config"]["dataset_id"] == "blobs"
        assert "zca_fingerprint" in resolved


class TestFullPipeline:
    def test_expert_distill_eval_export(self, workdir):
        expert_out = workdir / "expert"
        code = run_cli("expert", *data_args(workdir), "--epochs", "2", "--beta", "0.05",
                       "--net-depth", "2", "--net-width", "16",
                       "--batch-size", "128", "--out", str(expert_out))
        assert code == 0
        traj_path = expert_out / "expert_blobs_seed0.haba"
        assert traj_path.exists()

        distill_out = workdir / "distill"
        code = run_cli("distill", *data_args(workdir), "--bpc", "1", "--iterations", "5",
                       "--halls", "2", "--objective", "trajectory",
                       "--trajectory", str(traj_path),
                       "--syn-steps", "2", "--expert-span", "1", "--max-start", "1",
                       "--eta-h", "0.01", "--eta-b", "0.01",
                       "--net-depth", "2", "--net-width", "16",
                       "--out", str(distill_out))
        assert code == 0
        assert (distill_out / "fd.haba").exists()
        metrics = [json.loads(line)
                   for line in (distill_out / "metrics.jsonl").read_text().splitlines()]
        assert [m["iteration"] for m in metrics] == [0, 1, 2, 3, 4]

        eval_out = workdir / "eval"
        code = run_cli("eval", *data_args(workdir), "--fd", str(distill_out / "fd.haba"),
                       "--epochs", "3", "--repeats", "1",
                       "--net-depth", "2", "--net-width", "16",
                       "--out", str(eval_out))
        assert code == 0
        lines = (eval_out / "results.tsv").read_text().splitlines()
        assert lines[0].startswith("method\t")
        assert len(lines) == 2
        row = lines[1].split("\t")
        assert row[0] == "factorized" and row[1] == "blobs"
        assert 0.0 <= float(row[4]) <= 100.0

        images_out = workdir / "images"
        code = run_cli("export-images", "--fd", str(distill_out / "fd.haba"),
                       "--zca-stats", str(workdir / "cache" / "blobs_zca_stats.haba"),
                       "--out", str(images_out))
        assert code == 0
        assert sorted(p.name for p in images_out.iterdir()) == [
            "bases.png", "hall_00.png", "hall_01.png"]


class TestInspect:
    def test_inspect_prints_budget(self, workdir, capsys):
        out = workdir / "run0"
        code = run_cli("inspect", "--path", str(out / "fd.haba"))
        assert code == 0
        text = capsys.readouterr().out
        assert "kind: factorized_dataset" in text
        assert "hallucinators: 2 x" in text
        assert "total parameters:" in text
        assert "image equivalents:" in text


class TestErrors:
    def test_unknown_flag_exits_nonzero_with_usage(self, workdir, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("distill", "--no-such-flag")
        assert exc.value.code != 0
        assert "usage" in capsys.readouterr().err.lower()

    def test_bad_artifact_is_reported(self, workdir, tmp_path, capsys):
        bad = tmp_path / "bad.haba"
        bad.write_bytes(b"not a checkpoint")
        code = run_cli("inspect", "--path", str(bad))
        assert code == 1
        assert "error" in capsys.readouterr().err.lower()

    def test_eval_rejects_non_fd_artifact(self, workdir, capsys):
        traj = workdir / "expert" / "expert_blobs_seed0.haba"
        code = run_cli("eval", *data_args(workdir), "--fd", str(traj),
                       "--epochs", "1", "--repeats", "1", "--out", str(workdir / "bad_eval"))
        assert code == 2
        assert "factorized" in capsys.readouterr().err
