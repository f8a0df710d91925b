import json

import pytest

from zno.cli import main, parse_bins, parse_lengths, parse_seeds, resolve_config, CliUsageError
from zno.network import count_params, load_checkpoint
from zno.seqcore import load_dataset
from zno.trainer import RunRecord, read_csv

SMALL_DATA = {"n_train": 8, "n_val": 4, "n_test": 4, "T": 32, "seed": 0}


def small_config(tmp_path, base="desk_arma_bin0", epochs=2, name="c.json", **model):
    d = resolve_config(base).to_dict()
    d["data"].update(SMALL_DATA)
    d["optim"].update(epochs=epochs, batch_size=4)
    d["model"].update(model)
    d["tag"] = "small"
    path = tmp_path / name
    path.write_text(json.dumps(d))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = small_config(tmp, w=4, r=2, K=4, F=1, L=1)
    assert main(["train", "--config", cfg, "--seed", "1", "--out", str(tmp)]) == 0
    return tmp, cfg, tmp / "small" / "1" / "model.ckpt"


class TestParsing:
    def test_seeds(self):
        assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
        assert parse_seeds("0,2") == [0, 2]
        with pytest.raises(CliUsageError):
            parse_seeds("a..b")

    def test_bins(self):
        assert parse_bins("all") == [0, 1, 2, 3, 4]
        with pytest.raises(CliUsageError):
            parse_bins("5")

    def test_lengths(self):
        assert parse_lengths("4096,8192", 2048) == [4096, 8192]
        assert parse_lengths("2x,4x", 512) == [1024, 2048]


class TestGenerate:
    def test_arma(self, tmp_path, capsys):
        assert main(["generate", "--task", "arma", "--n", "4", "--T", "16", "--out", str(tmp_path)]) == 0
        assert "d_u=7" in capsys.readouterr().out
        batch, meta = load_dataset(tmp_path / "arma_n4_T16_s0.zds")
        assert batch.d_u == 7 and meta["task_spec"]["family"] == "arma"

    def test_narx(self, tmp_path, capsys):
        assert main(["generate", "--task", "narx", "--n", "2", "--T", "8", "--out", str(tmp_path)]) == 0
        assert "d_u=1" in capsys.readouterr().out

    def test_bin(self, tmp_path, capsys):
        main(["generate", "--task", "arma", "--bin", "4", "--n", "2", "--T", "8", "--out", str(tmp_path)])
        assert "rho_range=(0.99, 0.995)" in capsys.readouterr().out
        _, meta = load_dataset(tmp_path / "arma_bin4_n2_T8_s0.zds")
        assert meta["task_spec"]["rho_range"] == [0.99, 0.995]

    @pytest.mark.parametrize("args", [["--task", "narx", "--bin", "1"], ["--task", "arma", "--bin", "7"]])
    def test_bad_bin(self, tmp_path, args):
        assert main(["generate", *args, "--n", "2", "--T", "8", "--out", str(tmp_path)]) == 2


class TestTrain:
    @pytest.mark.parametrize("base,expected", [("matched_narx", 8537), ("tuned_arma", 12721),
                                               ("tuned_iir", 14677)])
    def test_param_count(self, tmp_path, capsys, base, expected):
        assert count_params(resolve_config(base).model) == expected
        cfg = small_config(tmp_path, base, epochs=0)
        assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
        assert f"params={expected}" in capsys.readouterr().out

    def test_outputs(self, trained):
        tmp, _, ckpt = trained
        rec = RunRecord.load(tmp / "small" / "1" / "record.json")
        assert rec.seed == 1 and len(rec.val_loss) == 2
        model, extra = load_checkpoint(ckpt)
        assert extra["seed"] == 1 and len(model) == rec.params

    def test_splane(self, tmp_path):
        cfg = small_config(tmp_path, epochs=1, w=4, r=2, K=2, L=1)
        assert main(["train", "--config", cfg, "--pole-mode", "s-iso", "--out", str(tmp_path)]) == 0
        rec = RunRecord.load(tmp_path / "small-siso" / "0" / "record.json")
        assert rec.config["model"]["pole_mode"] == "s-iso"

    def test_data_override(self, tmp_path):
        main(["generate", "--task", "arma", "--n", "16", "--T", "32", "--out", str(tmp_path)])
        cfg = small_config(tmp_path, epochs=1, w=4, r=2, K=2, L=1)
        data = str(tmp_path / "arma_n16_T32_s0.zds")
        assert main(["train", "--config", cfg, "--data", data, "--out", str(tmp_path)]) == 0

    def test_missing_config(self, tmp_path, capsys):
        assert main(["train", "--config", "no_such_profile", "--out", str(tmp_path)]) == 2
        assert "not found" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"w": 4}, "surprise": 1}))
        assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


class TestEvaluation:
    def test_eval(self, trained, capsys):
        tmp, cfg, ckpt = trained
        assert main(["eval", "--checkpoint", str(ckpt), "--config", cfg, "--out", str(tmp)]) == 0
        (row,) = read_csv(tmp / "small" / "eval.csv")
        rec = RunRecord.load(tmp / "small" / "1" / "record.json")
        assert row["test_rel_l2"] == pytest.approx(rec.test_rel_l2, rel=1e-12)

    def test_extrapolate(self, trained):
        tmp, cfg, ckpt = trained
        assert main(["extrapolate", "--checkpoint", str(ckpt), "--config", cfg,
                     "--lengths", "64,4x", "--out", str(tmp)]) == 0
        rows = read_csv(tmp / "small" / "extrapolation.csv")
        assert [r["eval_T"] for r in rows] == [32, 64, 128]
        assert rows[0]["ratio"] == 1.0

    def test_polemap(self, trained, capsys):
        tmp, _, ckpt = trained
        assert main(["polemap", "--checkpoint", str(ckpt), "--out", str(tmp)]) == 0
        rows = read_csv(tmp / "polemap.csv")
        assert len(rows) == 2 * 2
        assert {"layer", "channel", "re", "im", "residue_abs"} <= set(rows[0])
        assert all(r["abs"] < 0.999 for r in rows)

    def test_missing_checkpoint(self, tmp_path):
        assert main(["polemap", "--checkpoint", str(tmp_path / "nope.ckpt")]) == 2

    def test_sweep(self, tmp_path, capsys):
        cfg = small_config(tmp_path, epochs=1, w=4, r=2, K=2, L=1)
        assert main(["sweep", "--config", cfg, "--bins", "0,4", "--seeds", "0..1", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "small" / "sweep.csv")
        assert [r["bin"] for r in rows] == [0, 4] and rows[0]["n_seeds"] == 2


class TestChecks:
    def test_gradcheck(self, tmp_path, capsys):
        assert main(["gradcheck", "--n", "2", "--out", str(tmp_path)]) == 0
        assert capsys.readouterr().out.count("PASS") == 2
        assert len(read_csv(tmp_path / "gradcheck.csv")) == 2

    def test_gradcheck_failure_exit(self, capsys):
        assert main(["gradcheck", "--n", "1", "--step", "0.3", "--order", "2"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_oracle(self, capsys):
        assert main(["oracle", "--n", "3", "--T", "128"]) == 0
        assert capsys.readouterr().out.count("PASS") == 3

    def test_no_command(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2
