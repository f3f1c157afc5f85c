import csv
import io
import json

import pytest

from kfconformer.cli import main, run_bench

RUN = {
    "model": {"feat_dim": 4, "d_model": 8, "heads": 2, "ffn_dim": 16, "conv_kernel": 3, "n_blocks_enc1": 1,
              "n_blocks_enc2": 1, "vocab": 4, "mode": "kfds", "w": 1, "warmup_epochs": 1, "epochs": 2,
              "batch_size": 4, "lr": 3e-3},
    "data": {"vocab_size": 4, "feat_dim": 4, "num_utterances": 24, "label_len_range": [1, 3], "seed": 5},
    "train_fraction": 0.75,
}


def write_config(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", write_config(d, RUN), "--out", str(d / "out")]) == 0
    return d / "out"


def run_json(capsys, argv):
    capsys.readouterr()
    code = main(argv)
    return code, capsys.readouterr().out


class TestTrain:
    def test_outputs(self, trained):
        for f in ("metrics.csv", "manifest.json", "weights.bin", "config.json", "train.kfc", "heldout.kfc"):
            assert (trained / f).exists()

    def test_metrics_schema(self, trained):
        rows = list(csv.DictReader(open(trained / "metrics.csv")))
        assert list(rows[0]) == ["epoch", "split", "loss_ctc1", "loss_ctc2", "loss_joint", "ter",
                                 "drop_ratio_mean", "fallback_count"]
        assert [(r["epoch"], r["split"]) for r in rows] == [("0", "train"), ("0", "heldout"),
                                                            ("1", "train"), ("1", "heldout")]

    def test_materialized_config(self, trained):
        cfg = json.loads((trained / "config.json").read_text())
        assert cfg["model"]["alpha0"] == 0.5 and cfg["data"]["noise_sigma"] == 0.1

    def test_rerun_identical(self, trained, tmp_path):
        assert main(["train", "--config", write_config(tmp_path, RUN), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()

    def test_alpha_constraint(self, tmp_path, capsys):
        bad = json.loads(json.dumps(RUN))
        bad["model"]["alpha0"] = 0.9
        assert main(["train", "--config", write_config(tmp_path, bad), "--out", str(tmp_path / "o")]) == 1
        assert "alpha0 + alpha1" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        bad = {**RUN, "colour": 1}
        assert main(["train", "--config", write_config(tmp_path, bad), "--out", str(tmp_path / "o")]) == 1

    def test_dim_mismatch(self, tmp_path):
        bad = json.loads(json.dumps(RUN))
        bad["data"]["feat_dim"] = 5
        assert main(["train", "--config", write_config(tmp_path, bad), "--out", str(tmp_path / "o")]) == 1

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_exit_2(self, tmp_path, capsys):
        bad = json.loads(json.dumps(RUN))
        bad["model"]["lr"] = 1e30
        bad["model"]["clip_norm"] = 0.0
        code = main(["train", "--config", write_config(tmp_path, bad), "--out", str(tmp_path / "o")])
        assert code == 2 and "training failed" in capsys.readouterr().err


class TestEval:
    def args(self, trained, *extra):
        return ["eval", "--ckpt", str(trained), "--data", str(trained / "heldout.kfc"), *extra]

    def test_schema_and_dense(self, trained, capsys):
        code, out = run_json(capsys, self.args(trained, "--mode", "dense"))
        res = json.loads(out)
        assert code == 0 and list(res) == ["ter", "drop_ratio_mean", "fallback_count", "t_prime_mean"]
        assert res["drop_ratio_mean"] == 0

    def test_kfsa_keeps_length(self, trained, capsys):
        dense = json.loads(run_json(capsys, self.args(trained, "--mode", "dense"))[1])
        kfsa = json.loads(run_json(capsys, self.args(trained, "--mode", "kfsa"))[1])
        assert kfsa["t_prime_mean"] == dense["t_prime_mean"]

    def test_w_monotone(self, trained, capsys):
        drops = [json.loads(run_json(capsys, self.args(trained, "--mode", "kfds", "--w", str(w)))[1])
                 for w in (1, 2, 3)]
        assert drops[0]["drop_ratio_mean"] >= drops[1]["drop_ratio_mean"] >= drops[2]["drop_ratio_mean"]
        dense = json.loads(run_json(capsys, self.args(trained, "--mode", "dense"))[1])
        assert all(d["t_prime_mean"] <= dense["t_prime_mean"] for d in drops)

    def test_override_warns(self, trained, caplog):
        main(self.args(trained, "--w", "2"))
        assert "trained with" in caplog.text

    def test_missing_checkpoint(self, tmp_path, trained):
        assert main(["eval", "--ckpt", str(tmp_path), "--data", str(trained / "heldout.kfc")]) == 1

    def test_threads_env(self, trained, capsys, monkeypatch):
        one = run_json(capsys, self.args(trained))[1]
        monkeypatch.setenv("KFC_THREADS", "3")
        assert run_json(capsys, self.args(trained))[1] == one


class TestAnalyze:
    def test_rows_and_summary(self, trained, capsys):
        code, out = run_json(capsys, ["analyze", "--ckpt", str(trained), "--data", str(trained / "heldout.kfc"),
                                      "--emit", "-"])
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and list(rows[0]) == ["utt_id", "T", "U", "P", "w", "mode", "kept", "drop_ratio",
                                               "fallback"]
        assert len(rows) == 6 + 1 and rows[-1]["utt_id"] == "summary"
        body = rows[:-1]
        mean = sum(float(r["drop_ratio"]) for r in body) / len(body)
        assert float(rows[-1]["drop_ratio"]) == pytest.approx(mean, abs=1e-6)
        for r in body:
            if r["P"] == "0":
                assert r["fallback"] == "1" and float(r["drop_ratio"]) == 0

    def test_emit_file(self, trained, tmp_path):
        dest = tmp_path / "a.csv"
        assert main(["analyze", "--ckpt", str(trained), "--data", str(trained / "heldout.kfc"),
                     "--emit", str(dest), "--w", "2"]) == 0
        assert all(r["w"] == "2" for r in csv.DictReader(open(dest)))


class TestBench:
    def test_schema(self, capsys):
        code, out = run_json(capsys, ["bench", "--T", "40", "--d", "16", "--heads", "2", "--repeat", "1"])
        assert code == 0 and list(json.loads(out)) == ["T", "T_prime", "dense_mults", "sparse_mults", "ratio",
                                                       "dense_ms", "sparse_ms", "time_ratio"]

    def test_full_fraction(self):
        assert run_bench(50, 16, 2, 1.0, repeat=1)["ratio"] == 1.0

    def test_quadratic_ratio(self):
        r = run_bench(1000, 16, 2, 0.4, repeat=1)
        assert r["T_prime"] == 400 and r["ratio"] == 0.16

    def test_dense_count_formula(self):
        r = run_bench(64, 32, 4, 0.5, repeat=1)
        assert r["dense_mults"] == 2 * 4 * 64 ** 2 * 8

    def test_bad_fraction(self, capsys):
        assert main(["bench", "--keep-fraction", "0"]) == 1
