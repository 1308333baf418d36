import json

import numpy as np
import pytest

from gplvm_ais import cli
from gplvm_ais import data as dio
from gplvm_ais import synthetic as syn


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.csv"
    syn.write_csv(path, syn.make_manifold(n=40, d=5, latent_dim=2, seed=3))
    return str(path)


def train_args(toy_csv, out, method="ais", extra=()):
    return ["train", "--data", toy_csv, "--method", method,
            "--latent-dim", "2", "--inducing", "6", "--k", "2",
            "--iters", "6", "--batch", "8", "--lr", "0.02", "--seed", "5",
            "--out", str(out), *extra]


def metrics_without_wall(path):
    rows = dio.read_metrics(path)
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]


class TestTrainCommand:
    def test_artifacts_written(self, toy_csv, tmp_path):
        out = tmp_path / "run"
        assert cli.main(train_args(toy_csv, out)) == 0
        for name in ("manifest.json", "metrics.jsonl", "checkpoint.json",
                     "curves.csv"):
            assert (out / name).exists()
        rows = dio.read_metrics(out / "metrics.jsonl")
        assert len(rows) == 6
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["dataset"]["sha256"]
        assert manifest["config"]["method"] == "ais"
        assert "eta0" in manifest["resolved"]

    def test_unknown_method_exits_2(self, toy_csv, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(train_args(toy_csv, tmp_path / "x", method="xyz"))
        assert exc.value.code == 2

    def test_bad_batch_exits_2(self, toy_csv, tmp_path):
        code = cli.main(train_args(toy_csv, tmp_path / "x",
                                   extra=["--batch", "4000"]))
        assert code == 2

    def test_seed_determinism(self, toy_csv, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert cli.main(train_args(toy_csv, out1)) == 0
        assert cli.main(train_args(toy_csv, out2)) == 0
        assert metrics_without_wall(out1 / "metrics.jsonl") == \
            metrics_without_wall(out2 / "metrics.jsonl")
        assert (out1 / "checkpoint.json").read_bytes() == \
            (out2 / "checkpoint.json").read_bytes()

    def test_resume_reproduces_stream(self, toy_csv, tmp_path):
        full_out = tmp_path / "full"
        assert cli.main(train_args(toy_csv, full_out,
                                   extra=["--iters", "8"])) == 0
        half_out = tmp_path / "half"
        assert cli.main(train_args(toy_csv, half_out,
                                   extra=["--iters", "4"])) == 0
        rest_out = tmp_path / "rest"
        assert cli.main(train_args(
            toy_csv, rest_out,
            extra=["--iters", "8", "--resume",
                   str(half_out / "checkpoint.json")])) == 0
        full_rows = metrics_without_wall(full_out / "metrics.jsonl")
        rest_rows = metrics_without_wall(rest_out / "metrics.jsonl")
        assert full_rows[4:] == rest_rows
        assert (full_out / "checkpoint.json").read_bytes() == \
            (rest_out / "checkpoint.json").read_bytes()


class TestEvalCommand:
    def test_reports_three_metrics(self, toy_csv, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(train_args(toy_csv, out, method="mf")) == 0
        capsys.readouterr()
        code = cli.main(["eval", "--data", toy_csv, "--checkpoint",
                         str(out / "checkpoint.json"), "--samples", "4"])
        assert code == 0
        lines = capsys.readouterr().out.strip().split("\n")
        names = [ln.split()[0] for ln in lines]
        assert names == ["neg_elbo", "mse", "nell"]
        for ln in lines:
            parts = ln.split()
            float(parts[1])
            assert parts[2] == "+/-"

    def test_missing_checkpoint_exits_2(self, toy_csv):
        code = cli.main(["eval", "--data", toy_csv, "--checkpoint",
                         "/nonexistent/ckpt.json"])
        assert code == 2

    def test_se_shrinks_with_samples(self, toy_csv, tmp_path, capsys):
        out = tmp_path / "run"
        assert cli.main(train_args(toy_csv, out, method="mf")) == 0

        def neg_elbo_se(samples, seed):
            code = cli.main(["eval", "--data", toy_csv, "--checkpoint",
                             str(out / "checkpoint.json"), "--samples",
                             str(samples), "--seed", str(seed)])
            assert code == 0
            line = capsys.readouterr().out.strip().split("\n")[0]
            return float(line.split()[3])

        # CLT scaling: 16x the samples shrinks the SE about 4x (2x slack)
        se_small = np.mean([neg_elbo_se(4, s) for s in range(3)])
        se_big = np.mean([neg_elbo_se(64, s) for s in range(3)])
        assert se_big <= se_small / 2.0


class TestReconstructCommand:
    def test_no_masked_entries_exits_2(self, toy_csv, tmp_path):
        out = tmp_path / "run"
        assert cli.main(train_args(toy_csv, out, method="mf")) == 0
        code = cli.main(["reconstruct", "--data", toy_csv, "--checkpoint",
                         str(out / "checkpoint.json"),
                         "--out", str(tmp_path / "rec.csv")])
        assert code == 2

    def test_row_count_matches_masked_cells(self, toy_csv, tmp_path, capsys):
        out = tmp_path / "runm"
        args = train_args(toy_csv, out, method="mf",
                          extra=["--missing-rows", "0.1",
                                 "--missing-pixels", "0.4"])
        assert cli.main(args) == 0
        rec = tmp_path / "rec.csv"
        code = cli.main(["reconstruct", "--data", toy_csv, "--checkpoint",
                         str(out / "checkpoint.json"), "--out", str(rec)])
        assert code == 0
        printed = capsys.readouterr().out
        n_cells = int(printed.split("masked_cells")[1].split()[0])
        # 10% of 40 rows = 4 rows, 40% of 5 dims = 2 cells each
        assert n_cells == 8
        assert len(rec.read_text().strip().split("\n")) == n_cells + 1


class TestEvidenceCheckCommand:
    def test_pass_band(self, capsys):
        code = cli.main(["evidence-check", "--dim", "2", "--k-list", "8",
                         "--chains", "3000", "--eta", "0.05", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "unbiasedness band: PASS" in out

    def test_zero_dim_exits_2(self):
        assert cli.main(["evidence-check", "--dim", "0"]) == 2


class TestGradcheckCommand:
    def test_passes_and_deterministic(self, capsys):
        assert cli.main(["gradcheck", "--seed", "0"]) == 0
        out1 = capsys.readouterr().out
        assert cli.main(["gradcheck", "--seed", "0"]) == 0
        out2 = capsys.readouterr().out
        assert out1 == out2
        assert "PASS" in out1

    def test_detach_flow_ablation_differencing(self, capsys):
        changed, unchanged = cli.run_detach_ablation(seed=0)
        assert "latent.mean" in changed
        assert "inducing.u_scale_raw" in unchanged
        assert cli.main(["gradcheck", "--seed", "0",
                         "--detach-flow", "on"]) == 0
        assert "PASS" in capsys.readouterr().out


class TestBenchmarkCommand:
    def test_smoke_table_and_fit(self, tmp_path, capsys):
        path = tmp_path / "bench.csv"
        syn.write_csv(path, syn.make_manifold(n=48, d=6, seed=1))
        code = cli.main(["benchmark", "--data", str(path), "--k-list", "1,3",
                         "--iters", "1", "--batch", "16", "--seed", "0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "ais,1," in out and "ais,3," in out
        assert "ais_affine_r2" in out
