import json

import numpy as np
import pytest
import yaml

from helpers import run_pipeline, tiny_config_tree, write_config
from taskadapt import archive, config, persist
from taskadapt.cli import main
from taskadapt.data import combo_dataset
from taskadapt.engine import TaskAdaptiveClassifier
from taskadapt.evaluation import evaluate
from taskadapt.manifest import sha256_file
from taskadapt.tensor import checkpoint as ckpt


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "tiny.yaml", tiny_config_tree())
    files = run_pipeline(cfg, d / "first")
    return d, cfg, files


def test_rerun_reproduces_every_output(run, tmp_path):
    _, cfg, first = run
    second = run_pipeline(cfg, tmp_path / "second")
    assert sorted(first) == sorted(second)
    assert [name for name in first if first[name] != second[name]] == []
    assert {"theta.ckpt", "phi-no_ar.ckpt", "eval-no_ar.json", "active.png", "manifest-plot.json"} <= set(first)


def test_manifests_hash_their_outputs(run):
    d, _, files = run
    out = d / "first"
    for name in files:
        if not name.startswith("manifest-"):
            continue
        rec = json.loads(files[name])
        assert rec["code_version"] and len(rec["code_version"]) == 40
        for produced, digest in rec["outputs"].items():
            assert sha256_file(out / produced) == digest
    pre = json.loads(files["manifest-pretrain.json"])
    assert pre["config"]["pretrain"]["epochs"] == 2 and pre["seed"] == 0
    meta = json.loads(files["manifest-metatrain-no_ar.json"])
    assert meta["inputs"]["theta.ckpt"] == sha256_file(out / "theta.ckpt")


def test_checkpoints_round_trip_byte_stable(run, tmp_path):
    d, _, _ = run
    for name in ("theta.ckpt", "phi-no_ar.ckpt", "phi-no_ar-best.ckpt"):
        src = d / "first" / name
        ckpt.save(tmp_path / name, ckpt.load(src))
        assert (tmp_path / name).read_bytes() == src.read_bytes()


@pytest.mark.parametrize("section, key", [("pretrain", "epochs"), ("active", "task"), ("tasks", "way_min"),
                                          (None, "seed")])
def test_missing_config_key_is_named(tmp_path, capsys, section, key):
    tree = tiny_config_tree()
    del (tree[section] if section else tree)[key]
    cfg = write_config(tmp_path / "bad.yaml", tree)
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    where = f"{section}.{key}" if section else key
    assert f"missing config key '{where}'" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path, capsys):
    tree = tiny_config_tree()
    tree["eval"]["episode"] = 3
    cfg = write_config(tmp_path / "bad.yaml", tree)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "eval.episode" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["train"], ["eval", "--episodes", "x"], ["pretrain", "--workers", "0"]])
def test_usage_errors_exit_one(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_missing_config_flag_exits_one(capsys):
    assert main(["pretrain"]) == 1
    assert "--config is required" in capsys.readouterr().err


def test_runtime_failure_exits_two(run, tmp_path, capsys):
    _, cfg, _ = run
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 2
    assert "theta.ckpt" in capsys.readouterr().err


def test_bad_archive_magic(tmp_path, capsys):
    junk = tmp_path / "junk.tad"
    junk.write_bytes(b"NOTADATA" + bytes(40))
    tree = tiny_config_tree()
    tree["pretrain_data"]["archive"] = str(junk)
    cfg = write_config(tmp_path / "c.yaml", tree)
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "bad archive magic" in capsys.readouterr().err


def test_pretrain_from_archive_matches_generated_data(run, tmp_path):
    d, _, _ = run
    tree = tiny_config_tree()
    tree["pretrain_data"]["archive"] = str(d / "first" / "pretrain.tad")
    cfg = write_config(tmp_path / "c.yaml", tree)
    assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "manifest-pretrain.json").read_text())
    assert rec["inputs"] == {"pretrain.tad": sha256_file(d / "first" / "pretrain.tad")}


def test_arch_mismatch_names_both_descriptors(run, tmp_path, capsys):
    d, _, _ = run
    tree = tiny_config_tree()
    tree["arch"]["pre_channels"] = 5
    cfg = write_config(tmp_path / "c.yaml", tree)
    code = main(["eval", "--config", str(cfg), "--out", str(tmp_path), "--theta", str(d / "first" / "theta.ckpt"),
                 "--phi", str(d / "first" / "phi-no_ar.ckpt")])
    err = capsys.readouterr().err
    assert code == 2
    assert "'pre_channels': 4" in err and "'pre_channels': 5" in err


def test_eval_single_episode_matches_library_call(run, tmp_path):
    d, cfg_path, _ = run
    first = d / "first"
    args = ["eval", "--config", str(cfg_path), "--episodes", "1", "--seed", "3", "--theta", str(first / "theta.ckpt"),
            "--phi", str(first / "phi-no_ar.ckpt")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    cfg = config.load(cfg_path).with_seed(3)
    model = TaskAdaptiveClassifier(persist.load_extractor(first / "theta.ckpt"),
                                   persist.load_adaptation(first / "phi-no_ar.ckpt"), "no_ar")
    report = evaluate(model, cfg.tasks, 1, seed=3, split=cfg.eval.split, label="no_ar")
    written = (tmp_path / "a" / "eval-no_ar.json").read_text(encoding="utf-8")
    assert written == report.to_json()
    assert (tmp_path / "b" / "eval-no_ar.json").read_text(encoding="utf-8") == written


def test_eval_baseline_and_zero_episodes(run, tmp_path):
    _, cfg, _ = run
    src = ["--config", str(cfg), "--theta", str(run[0] / "first" / "theta.ckpt"), "--out", str(tmp_path)]
    assert main(["eval", "--baseline", "--episodes", "1"] + src) == 0
    assert json.loads((tmp_path / "eval-baseline.json").read_text())["label"] == "baseline"
    assert main(["eval", "--episodes", "0"] + src) == 2


def test_gen_data_round_trip(run):
    d, cfg_path, _ = run
    cfg = config.load(cfg_path)
    p = cfg.pretrain_data
    expect = combo_dataset(p.n_colors, p.n_textures, p.per_class, cfg.tasks.style, cfg.seed)
    loaded = archive.load(d / "first" / "pretrain.tad")
    assert np.array_equal(archive.quantize(loaded.images), archive.quantize(expect.images))
    assert np.array_equal(loaded.labels, expect.labels) and loaded.num_classes == 6
    test = archive.load(d / "first" / "colors-test.tad")
    assert test.num_classes == 6 and len(test) == 6 * 3


def test_plot_rejects_unknown_record(tmp_path):
    rec = tmp_path / "odd.json"
    rec.write_text(json.dumps({"kind": "mystery"}))
    assert main(["plot", str(rec), "--out", str(tmp_path)]) == 2


def test_init_config_writes_loadable_defaults(tmp_path, capsys):
    path = tmp_path / "default.yaml"
    assert main(["init-config", str(path), "--seed", "4"]) == 0
    cfg = config.load(path)
    assert cfg.seed == 4 and cfg.arch == config.ExtractorArch()
    assert cfg.metatrain == config.MetaTrainConfig() and cfg.active.iterations == 15
    assert yaml.safe_load(path.read_text())["tasks"]["way_max"] == 5
    assert main(["summary", "--config", str(path)]) == 0
    assert "film params" in capsys.readouterr().out


def test_import_idx_command(tmp_path, capsys):
    archive.write_idx(tmp_path / "img", np.arange(4 * 5 * 5, dtype=np.uint8).reshape(4, 5, 5))
    archive.write_idx(tmp_path / "lab", np.array([0, 1, 2, 1], dtype=np.uint8))
    assert main(["import-idx", str(tmp_path / "img"), str(tmp_path / "lab"), "--out", str(tmp_path)]) == 0
    assert "imported 4 examples, 3 classes, 5x5x1" in capsys.readouterr().out
    data = archive.load(tmp_path / "digits.tad")
    assert data.images.shape == (4, 1, 5, 5)


def test_data_dir_env_var(run, tmp_path, monkeypatch):
    _, cfg, _ = run
    monkeypatch.setenv("TASKADAPT_DATA_DIR", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(cfg), "--per-class", "1"]) == 0
    assert (tmp_path / "env" / "manifest-gen-data.json").exists()
