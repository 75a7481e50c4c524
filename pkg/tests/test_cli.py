"""Config grammar, profiles, and the train/eval/ablate/gen-data pipeline."""

import csv
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import mini_run_config
from vqagpt.cli import CHECKPOINT_NAME, EVAL_CSV, METRICS_CSV, main
from vqagpt.config import (
    PROFILES,
    RunConfig,
    apply_profile,
    load_config_file,
    parse_config,
    serialize_config,
)
from vqagpt.errors import ConfigError
from vqagpt.model import init_params, load_checkpoint
from vqagpt.tokenizers import Vocabulary


def write_config(path: Path, cfg: RunConfig) -> str:
    path.write_text(serialize_config(cfg))
    return str(path)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# config grammar


def test_parse_serialize_parse_is_fixed_point():
    cfg = replace(RunConfig(), d=48, lr=0.00037, order="early_vision",
                  rephrased_holdout=True, data_dir="some/dir")
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


def test_parse_applies_onto_base_and_ignores_comments():
    cfg = parse_config(
        "# comment line\n\n  epochs = 3 \nvision_backend = vit_lite\n", RunConfig()
    )
    assert cfg.epochs == 3
    assert cfg.vision_backend == "vit_lite"
    assert cfg.batch_size == 64  # untouched default


def test_parse_rejects_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("learning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="duplicate key"):
        parse_config("epochs = 1\nepochs = 2\n")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config("epochs: 1\n")


def test_parse_value_type_errors():
    with pytest.raises(ConfigError, match="bad value for 'epochs'"):
        parse_config("epochs = three\n")
    with pytest.raises(ConfigError, match="bad value for 'lr'"):
        parse_config("lr = fast\n")
    with pytest.raises(ConfigError, match="bad value for 'use_type_embedding'"):
        parse_config("use_type_embedding = 1\n")  # strict true/false


def test_paper_recipe_is_the_default():
    cfg = RunConfig()
    assert cfg.batch_size == 64
    assert cfg.epochs == 80
    assert cfg.lr == 1e-5
    assert cfg.vision_pose_mode == "zero"
    assert apply_profile(cfg, "paper") == cfg


def test_desk_profile_overrides():
    cfg = apply_profile(RunConfig(), "desk")
    assert cfg.epochs == 10
    assert cfg.batch_size == 4
    assert cfg.lr == 7e-4
    assert cfg.beta2 == 0.95
    assert cfg.patch_grid == 2
    assert cfg.vision_pose_mode == "actual"
    assert cfg.n_samples == 2000
    with pytest.raises(ConfigError, match="unknown profile"):
        apply_profile(cfg, "datacenter")
    assert set(PROFILES) == {"desk", "paper"}


def test_validate_rejects_bad_ranges():
    with pytest.raises(ConfigError, match="precision"):
        replace(RunConfig(), precision="f16").validate()
    with pytest.raises(ConfigError, match="lr"):
        replace(RunConfig(), lr=0.0).validate()
    with pytest.raises(ConfigError, match="divisible"):
        replace(RunConfig(), d=30, n_heads=4).validate()
    RunConfig().validate()


def test_load_config_file_missing_path_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config_file(tmp_path / "nope.cfg")


# ---------------------------------------------------------------------------
# pipeline fixtures


@pytest.fixture(scope="module")
def trained_mini(mini_corpus, tmp_path_factory):
    """One 2-epoch training run over the mini corpus, shared by eval tests."""
    out = tmp_path_factory.mktemp("train_out")
    cfg = mini_run_config(mini_corpus["root"], out)
    cfg_path = write_config(out / "run.cfg", cfg)
    assert main(["train", "--config", cfg_path]) == 0
    return {"out": out, "cfg": cfg, "data": Path(mini_corpus["root"])}


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_subcommand(tmp_path):
    cfg = replace(
        RunConfig(),
        n_samples=24,
        image_size=16,
        test_fraction=0.25,
        data_dir=str(tmp_path / "corpus"),
    )
    cfg_path = write_config(tmp_path / "gen.cfg", cfg)
    assert main(["gen-data", "--config", cfg_path]) == 0
    root = tmp_path / "corpus"
    assert (root / "train.jsonl").exists()
    assert (root / "test.jsonl").exists()
    assert (root / "labels.tsv").exists()
    assert sorted((root / "images").glob("*.ppm"))


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_metrics(trained_mini):
    out = trained_mini["out"]
    assert (out / CHECKPOINT_NAME).exists()
    rows = read_csv(out / METRICS_CSV)
    assert [r["epoch"] for r in rows] == ["1", "2"]
    for r in rows:
        float(r["train_loss"])  # parseable repr
        assert 0.0 <= float(r["val_acc"]) <= 1.0


def test_epochs_zero_checkpoint_equals_initialization(mini_corpus, tmp_path):
    out = tmp_path / "zero_out"
    cfg = mini_run_config(mini_corpus["root"], out, epochs=0)
    cfg_path = write_config(tmp_path / "zero.cfg", cfg)
    assert main(["train", "--config", cfg_path]) == 0

    rows = read_csv(out / METRICS_CSV)
    assert [r["epoch"] for r in rows] == ["0"]

    _, vocab_lines, _, tensors = load_checkpoint(out / CHECKPOINT_NAME)
    vocab = Vocabulary.from_lines(vocab_lines)
    fresh = init_params(cfg.to_model_config(vocab.size), cfg.seed, np.float32)
    assert set(tensors) == set(fresh.params)
    for name, arr in tensors.items():
        assert np.array_equal(arr, fresh.params[name].data), name


# ---------------------------------------------------------------------------
# eval


def test_eval_reports_and_recombines_per_type(trained_mini, tmp_path, capsys):
    eval_out = tmp_path / "eval_out"
    rc = main([
        "eval",
        "--checkpoint", str(trained_mini["out"] / CHECKPOINT_NAME),
        "--data", str(trained_mini["data"]),
        "--out", str(eval_out),
    ])
    assert rc == 0
    text = capsys.readouterr().out
    assert "test" in text and "loss=" in text
    rows = read_csv(eval_out / EVAL_CSV)
    overall = [r for r in rows if r["scope"] == "overall"]
    per_type = [r for r in rows if r["scope"] != "overall"]
    assert len(overall) == 1
    assert {r["scope"] for r in per_type} == {"color", "shape", "count"}
    # support-weighted per-type accuracy recombines to the overall accuracy
    total = sum(int(r["n"]) for r in per_type)
    assert total == int(overall[0]["n"])
    weighted = sum(int(r["n"]) * float(r["acc"]) for r in per_type) / total
    assert weighted == pytest.approx(float(overall[0]["acc"]), abs=2e-6)


def test_eval_after_overfit_scores_train_set_near_one(tmp_path):
    # tiny corpus, long full-batch training, then evaluate on the very
    # samples the model saw: accuracy should be essentially perfect
    data = tmp_path / "tiny"
    gen_cfg = replace(
        RunConfig(), n_samples=16, image_size=16, test_fraction=0.25,
        data_dir=str(data),
    )
    assert main(["gen-data", "--config", write_config(tmp_path / "g.cfg", gen_cfg)]) == 0

    out = tmp_path / "overfit_out"
    cfg = mini_run_config(data, out, epochs=150, lr=3e-3, batch_size=16)
    assert main(["train", "--config", write_config(tmp_path / "t.cfg", cfg)]) == 0

    eval_dir = tmp_path / "train_as_test"
    shutil.copytree(data, eval_dir)
    shutil.copy(eval_dir / "train.jsonl", eval_dir / "test.jsonl")
    rc = main([
        "eval",
        "--checkpoint", str(out / CHECKPOINT_NAME),
        "--data", str(eval_dir),
        "--out", str(tmp_path / "overfit_eval"),
    ])
    assert rc == 0
    rows = read_csv(tmp_path / "overfit_eval" / EVAL_CSV)
    overall = next(r for r in rows if r["scope"] == "overall")
    assert float(overall["acc"]) >= 0.99


# ---------------------------------------------------------------------------
# rephrased-query protocol


def test_rephrased_holdout_training_and_eval(mini_corpus, tmp_path, capsys):
    out = tmp_path / "reph_out"
    cfg = mini_run_config(mini_corpus["root"], out, epochs=1, rephrased_holdout=True)
    assert main(["train", "--config", write_config(tmp_path / "r.cfg", cfg)]) == 0

    # the held-out template's distinctive words never reach the vocabulary
    _, vocab_lines, _, _ = load_checkpoint(out / CHECKPOINT_NAME)
    words = set(Vocabulary.from_lines(vocab_lines).token_to_id)
    assert {"what", "shape", "color"} <= words
    assert not ({"identify", "shown", "tell"} & words)

    rc = main([
        "eval",
        "--checkpoint", str(out / CHECKPOINT_NAME),
        "--data", str(mini_corpus["root"]),
        "--out", str(out),
        "--rephrased",
    ])
    assert rc == 0
    text = capsys.readouterr().out
    assert "default_templates" in text
    assert "rephrased" in text
    assert "rephrased degradation (default acc - rephrased acc):" in text
    blocks = {r["block"] for r in read_csv(out / EVAL_CSV)}
    assert blocks == {"default_templates", "rephrased"}


# ---------------------------------------------------------------------------
# exit codes


def test_exit_code_2_on_config_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["train", "--config", str(bad)]) == 2


def test_exit_code_3_on_data_error(tmp_path):
    cfg = mini_run_config(tmp_path / "missing", tmp_path / "out")
    cfg_path = write_config(tmp_path / "c.cfg", cfg)
    assert main(["train", "--config", cfg_path]) == 3


def test_exit_code_3_on_unsatisfiable_generator(tmp_path):
    cfg = replace(RunConfig(), grid_size=4, data_dir=str(tmp_path / "d"))
    cfg_path = write_config(tmp_path / "g.cfg", cfg)
    assert main(["gen-data", "--config", cfg_path]) == 3


def test_exit_code_4_on_checkpoint_error(tmp_path, mini_corpus):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint at all")
    rc = main([
        "eval", "--checkpoint", str(junk),
        "--data", str(mini_corpus["root"]), "--out", str(tmp_path / "o"),
    ])
    assert rc == 4


def test_exit_code_2_on_label_map_mismatch(trained_mini, tmp_path):
    # a grid-1 corpus has 8 answer classes, the checkpoint was trained on 11
    other = tmp_path / "grid1"
    gen_cfg = replace(
        RunConfig(), n_samples=8, grid_size=1, image_size=16, data_dir=str(other)
    )
    assert main(["gen-data", "--config", write_config(tmp_path / "g1.cfg", gen_cfg)]) == 0
    rc = main([
        "eval",
        "--checkpoint", str(trained_mini["out"] / CHECKPOINT_NAME),
        "--data", str(other),
        "--out", str(tmp_path / "mout"),
    ])
    assert rc == 2
