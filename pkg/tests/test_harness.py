import csv

import numpy as np
import pytest

from gradobf import harness
from gradobf.cli import main
from gradobf.core import gen_shapes_dataset, prng_new, read_ppm, write_ppm
from gradobf.harness import (
    ConfigError,
    ExperimentConfig,
    compare_defenses,
    load_config,
    parse_config_text,
    run_experiment,
    select_images,
    verify_summary,
)


@pytest.fixture(scope="module")
def eval_data():
    return gen_shapes_dataset(80, 4, 32, prng_new(0, "eval-data"))


def _cfg(tmp_path, **kw):
    base = dict(n_images=6, max_rounds=8, output_dir=str(tmp_path / "run"))
    base.update(kw)
    return ExperimentConfig(**base)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# --------------------------------------------------------------------------- config


def test_config_text_parsing():
    text = "# comment\nseed = 3\n\nattack = bpda(lr=0.1)  # trailing\n"
    assert parse_config_text(text) == {"seed": "3", "attack": "bpda(lr=0.1)"}
    with pytest.raises(ConfigError):
        parse_config_text("seed 3\n")


def test_load_config_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("seed = 3\nn_images = 4\ndefense = fd\n")
    cfg = load_config(path, n_images=9, defense=None)
    assert cfg.seed == 3 and cfg.n_images == 9 and cfg.defense == "fd"


@pytest.mark.parametrize("values", [
    {"colour": "red"},
    {"seed": "x"},
    {"seed": "-1"},
    {"defense": "fd+blur"},
    {"attack": "pgd"},
    {"n_images": "0"},
    {"bound_mode": "wrap"},
])
def test_bad_configs(values):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(values)


def test_config_echo_round_trips():
    cfg = ExperimentConfig(seed=5, defense="fd+rdg(delta=0.15)", l2_bound=0.04)
    again = ExperimentConfig.from_mapping(parse_config_text(cfg.echo()))
    assert again == cfg


# --------------------------------------------------------------------------- runs


def test_select_images_picks_correct_and_wrong_targets(reference, eval_data):
    idx, targets = select_images(reference, eval_data, 20, 0)
    assert np.all(reference.predict(eval_data.images[idx]) == eval_data.labels[idx])
    assert np.all(targets != eval_data.labels[idx])
    with pytest.raises(ValueError):
        select_images(reference, eval_data, 1000, 0)


def test_zero_eps_attack_has_no_success(tmp_path, reference, eval_data):
    cfg = _cfg(tmp_path, attack="ifgsm(eps=0.0,iters=1)")
    report = run_experiment(cfg, reference, eval_data)
    assert report.summary["final_asr"] == 0.0
    assert report.summary["final_acc"] == report.summary["clean_acc"] == 1.0


def test_output_files_and_schema(tmp_path, reference, eval_data):
    cfg = _cfg(tmp_path, defense="fd+rdg")
    run_experiment(cfg, reference, eval_data)
    out = tmp_path / "run"
    for name in ("traces.csv", "curves.csv", "summary.csv", "finals.csv", "config.echo", "timing.txt"):
        assert (out / name).exists()
    assert _rows(out / "traces.csv")[0] == ["image_id", "round", "l2", "linf", "pred", "success"]
    assert _rows(out / "curves.csv")[0] == ["round", "acc", "asr"]
    assert len(_rows(out / "curves.csv")) == 1 + 9
    assert verify_summary(out) == []


def test_verify_summary_catches_tampering(tmp_path, reference, eval_data):
    run_experiment(_cfg(tmp_path), reference, eval_data)
    out = tmp_path / "run"
    rows = _rows(out / "summary.csv")
    rows = [[k, "0.123" if k == "final_asr" else v] for k, v in rows]
    with open(out / "summary.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert any("final_asr" in p for p in verify_summary(out))


def test_same_config_same_bytes(tmp_path, reference, eval_data):
    a = run_experiment(_cfg(tmp_path, output_dir=str(tmp_path / "a"), defense="fd+rdg"), reference, eval_data)
    b = run_experiment(_cfg(tmp_path, output_dir=str(tmp_path / "b"), defense="fd+rdg", threads=3),
                       reference, eval_data)
    for name in ("traces.csv", "curves.csv", "summary.csv", "finals.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.summary == b.summary


def test_compare_rows(tmp_path, reference, eval_data):
    configs = [_cfg(tmp_path, defense=d, attack="none") for d in ("identity", "fd", "fd+rdg")]
    rows = compare_defenses(configs, reference, eval_data, corpus_size=30)
    assert [r["defense"] for r in rows] == ["identity", "fd", "fd+rdg"]
    assert rows[0]["transform_l2"] == 0.0 and rows[0]["transform_ssim"] == 1.0
    assert rows[2]["transform_l2"] > rows[1]["transform_l2"]
    assert rows[0]["attack_asr"] == ""


def test_compare_rejects_mismatched_configs(tmp_path, reference, eval_data):
    configs = [_cfg(tmp_path), _cfg(tmp_path, seed=1)]
    with pytest.raises(ConfigError):
        compare_defenses(configs, reference, eval_data)


# --------------------------------------------------------------------------- CLI


def test_cli_attack_with_config_and_override(tmp_path, capsys):
    conf = tmp_path / "c.txt"
    conf.write_text(f"n_images = 3\nmax_rounds = 4\ndefense = fd\noutput_dir = {tmp_path / 'o'}\n")
    code = main(["attack", "--config", str(conf), "--attack", "bpda(lr=0.1)"])
    assert code == 0
    assert "attack = bpda(lr=0.1)" in (tmp_path / "o" / "config.echo").read_text()
    assert "final_asr=" in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert main(["attack", "--no-such-flag"]) == 1
    assert main(["attack", "--defense", "fd+blur", "--out", str(tmp_path)]) == 1
    assert "blur" in capsys.readouterr().err
    assert main(["attack", "--config", str(tmp_path / "missing.txt")]) == 1
    # a dataset directory that does not exist is a runtime failure
    assert main(["attack", "--dataset", str(tmp_path / "nowhere"), "--n-images", "1",
                 "--out", str(tmp_path / "r")]) == 2
    assert main([]) == 1


def test_cli_transform(tmp_path, capsys):
    img = gen_shapes_dataset(1, 4, 32, prng_new(0, "t")).images[0]
    write_ppm(img, tmp_path / "a.ppm")
    code = main(["transform", "--defense", "fd+rdg(delta=0.15)", "--in", str(tmp_path / "a.ppm"),
                 "--out", str(tmp_path / "b.ppm")])
    lines = capsys.readouterr().out.splitlines()
    assert code == 0
    assert lines[0].startswith("l2=") and lines[1].startswith("ssim=")
    assert float(lines[0][3:]) > 0 and float(lines[1][5:]) < 1
    assert read_ppm(tmp_path / "b.ppm").shape == (32, 32, 3)


def test_cli_gen_data_and_compare(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "ds"), "--n", "40"]) == 0
    code = main(["compare", "--dataset", str(tmp_path / "ds"), "--n-images", "2", "--max-rounds", "2",
                 "--defenses", "identity;fd", "--out", str(tmp_path / "cmp")])
    assert code == 0
    rows = _rows(tmp_path / "cmp" / "comparison.csv")
    assert rows[0] == harness.COMPARISON_HEADER and len(rows) == 3
    assert (tmp_path / "cmp" / "fd" / "summary.csv").exists()


def test_cli_check_passes_on_reference(capsys):
    code = main(["check", "--images", "2", "--samples", "10"])
    out = capsys.readouterr().out
    assert code == 0, out
    assert "gradient max relative error" in out and "check passed" in out
