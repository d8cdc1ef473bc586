import json

import pytest

from checkpoint import load_checkpoint
from rsa_rank import CHECKPOINT_FILE, HISTORY_FILE, PER_QUERY_FILE, PREDICTIONS_FILE, main
from run_history import RUN_FILE

SMALL = ["--train-queries", "12", "--valid-queries", "4", "--test-queries", "4",
         "--docs-per-query", "5", "--num-features", "4"]
FAST = ["--hidden", "4", "--max-epochs", "2", "--patience", "2", "--batch-size", "4", "--seed", "1"]


def _last_value(output, key):
    for line in output.splitlines():
        name, _, value = line.partition("\t")
        if name == key:
            return value
    raise AssertionError(f"{key} not printed")


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--out", str(out), "--seed", "3"] + SMALL) == 0
    return out


@pytest.fixture
def trained(tmp_path, data_dir, capsys):
    out = tmp_path / "runs" / "rsa"
    code = main(["train", "--train", str(data_dir / "train.txt"), "--valid", str(data_dir / "vali.txt"),
                 "--out", str(out)] + FAST)
    assert code == 0
    return out, capsys.readouterr().out


def test_synth_writes_three_splits(data_dir):
    for name in ("train.txt", "vali.txt", "test.txt"):
        assert (data_dir / name).stat().st_size > 0
    assert len((data_dir / "vali.txt").read_text().splitlines()) == 4 * 5


def test_missing_required_path_is_a_usage_error(data_dir, capsys):
    assert main(["train", "--train", str(data_dir / "train.txt")]) == 2
    assert "--valid" in capsys.readouterr().err


def test_unknown_subcommand_is_a_usage_error():
    assert main(["fly"]) == 2


def test_train_writes_artifacts_and_eval_reproduces_validation_score(trained, data_dir, capsys):
    out, printed = trained
    assert (out / CHECKPOINT_FILE).exists()
    history = (out / HISTORY_FILE).read_text().splitlines()
    assert history[0] == "epoch\ttrain_loss\tvalid_ndcg10"
    record = json.loads((out / RUN_FILE).read_text())
    assert record["best_epoch"] == int(_last_value(printed, "best_epoch"))

    eval_out = out / "eval_valid"
    assert main(["eval", "--model", str(out / CHECKPOINT_FILE), "--test", str(data_dir / "vali.txt"),
                 "--out", str(eval_out)]) == 0
    printed_eval = capsys.readouterr().out
    assert _last_value(printed_eval, "NDCG@10") == _last_value(printed, "valid_NDCG@10")
    assert len((eval_out / PER_QUERY_FILE).read_text().splitlines()) == 1 + 4


def test_predict_writes_one_row_per_document(trained, data_dir):
    out, _ = trained
    assert main(["predict", "--model", str(out / CHECKPOINT_FILE), "--test", str(data_dir / "test.txt"),
                 "--out", str(out)]) == 0
    rows = (out / PREDICTIONS_FILE).read_text().splitlines()
    assert rows[0] == "qid\tdoc_index\tscore"
    assert len(rows) == 1 + 4 * 5
    assert [r.split("\t")[1] for r in rows[1:6]] == ["0", "1", "2", "3", "4"]


def test_attention_export_and_unknown_qid(trained, data_dir, capsys):
    out, _ = trained
    base = ["attention", "--model", str(out / CHECKPOINT_FILE), "--test", str(data_dir / "test.txt"),
            "--out", str(out)]
    qid = (data_dir / "test.txt").read_text().split()[1].split(":")[1]
    assert main(base + ["--qid", qid]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 4
    for name in ("plus", "gt", "minus", "lt"):
        assert (out / "attention" / f"{name}_sigma.csv").exists()
    assert main(base + ["--qid", "no-such-query"]) == 1
    assert main(base) == 2


def test_significance_and_compare(trained, data_dir, tmp_path, capsys):
    out, _ = trained
    per_query = {}
    for name, model in (("rsa", out / CHECKPOINT_FILE),):
        target = tmp_path / f"eval_{name}"
        assert main(["eval", "--model", str(model), "--test", str(data_dir / "test.txt"),
                     "--out", str(target)]) == 0
        per_query[name] = target / PER_QUERY_FILE
    capsys.readouterr()

    assert main(["significance", "--a", str(per_query["rsa"]), "--b", str(per_query["rsa"])]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "metric\tmean_a\tmean_b\tt\tdf\tp"
    assert all(line.split("\t")[-1].startswith("1") for line in lines[1:])

    assert main(["compare", "--system", f"a={per_query['rsa']}", "--system", f"b={per_query['rsa']}"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert main(["compare", "--system", f"a={per_query['rsa']}"]) == 2
    assert main(["significance", "--a", str(per_query["rsa"])]) == 2


def test_single_encoder_training(tmp_path, data_dir):
    out = tmp_path / "sa"
    assert main(["train", "--train", str(data_dir / "train.txt"), "--valid", str(data_dir / "vali.txt"),
                 "--out", str(out), "--variant", "sa", "--encoders", "+"] + FAST) == 0
    model = load_checkpoint(out / CHECKPOINT_FILE)
    assert model.config.encoders == ("+",)
    assert model.config.variant == "listnet_sa"


def test_runs_lists_recorded_training(trained, capsys):
    out, _ = trained
    assert main(["runs", "--out", str(out.parent)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2 and lines[1].startswith("rsa\t")


def test_config_dump_merges_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("hidden: 16\nlearning_rate: 0.01\n")
    assert main(["config-dump", "--config", str(cfg), "--learning-rate", "0.5"]) == 0
    text = capsys.readouterr().out
    assert "hidden: 16" in text
    assert "learning_rate: 0.5" in text
    cfg.write_text("bogus_key: 1\n")
    assert main(["config-dump", "--config", str(cfg)]) == 2


def test_stats_table(data_dir, capsys):
    assert main(["stats", "--train", str(data_dir / "train.txt"), "--test", str(data_dir / "test.txt")]) == 0
    assert len(capsys.readouterr().out.splitlines()) >= 3


def test_eval_rejects_data_wider_than_the_checkpoint(trained, tmp_path):
    out, _ = trained
    wide = tmp_path / "wide"
    assert main(["synth", "--out", str(wide), "--seed", "4", "--num-features", "8", "--train-queries", "2",
                 "--valid-queries", "2", "--test-queries", "2", "--docs-per-query", "3"]) == 0
    assert main(["eval", "--model", str(out / CHECKPOINT_FILE), "--test", str(wide / "test.txt"),
                 "--out", str(tmp_path / "wide_eval")]) == 1


def test_huge_feature_id_is_a_data_error(trained, tmp_path, capsys):
    out, _ = trained
    bad = tmp_path / "bad.txt"
    bad.write_text("1 qid:1 999999999:1\n")
    assert main(["eval", "--model", str(out / CHECKPOINT_FILE), "--test", str(bad)]) == 1
    assert "line 1" in capsys.readouterr().err
