import pytest
from hypothesis import given, settings, strategies as st

from mosaictrain.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    main,
    parse_variant,
)
from mosaictrain.config import DEFAULTS, ConfigError, coerce, resolve
from mosaictrain.errors import InvalidComboError


def run(args):
    return main([str(a) for a in args])


TRAIN_FAST = ["train", "--epochs", 1, "--batch-size", 8,
              "--synthetic-classes", 3, "--synthetic-per-class", 4,
              "--c", 16, "--channels", "4,8,16,32,64"]


# ---------------------------------------------------------------------------
# config machinery


def test_coerce_types():
    assert coerce("train.epochs", "5") == 5
    assert coerce("train.lr_new", "0.01") == 0.01
    assert coerce("train.use_mosaic", "false") is False
    assert coerce("model.channels", "1,2,3") == (1, 2, 3)
    assert coerce("data.root", "somewhere") == "somewhere"
    with pytest.raises(ConfigError):
        coerce("nonsense.key", "1")
    with pytest.raises(ConfigError):
        coerce("train.epochs", "three")


def test_resolve_precedence_basic(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("train.epochs = 9\ntrain.batch_size = 2\n# comment\n")
    cfg = resolve(f, {"train.epochs": 4})
    assert cfg["train.epochs"] == 4          # flag beats file
    assert cfg["train.batch_size"] == 2      # file beats default
    assert cfg["train.lr_new"] == DEFAULTS["train.lr_new"]  # default survives


@settings(max_examples=30, deadline=None)
@given(st.sets(st.sampled_from(sorted(DEFAULTS)), max_size=6),
       st.sets(st.sampled_from(sorted(DEFAULTS)), max_size=6))
def test_resolve_precedence_property(tmp_path_factory, file_keys, flag_keys):
    def marker(key, salt):
        default = DEFAULTS[key]
        if isinstance(default, bool):
            return not default
        if isinstance(default, int):
            return default + salt
        if isinstance(default, float):
            return default + salt * 0.5
        if isinstance(default, tuple):
            return tuple(v + salt for v in default)
        return f"{default}_{salt}"

    tmp = tmp_path_factory.mktemp("cfg")
    file_values = {k: marker(k, 1) for k in file_keys}
    flag_values = {k: marker(k, 2) for k in flag_keys}
    body = "\n".join(
        f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
        for k, v in file_values.items())
    path = tmp / "prop.cfg"
    path.write_text(body + "\n")
    cfg = resolve(path, flag_values)
    for key in DEFAULTS:
        if key in flag_values:
            assert cfg[key] == flag_values[key]
        elif key in file_values:
            assert cfg[key] == file_values[key]
        else:
            assert cfg[key] == DEFAULTS[key]


def test_variant_parsing():
    assert parse_variant("baseline") == "baseline"
    assert parse_variant("P&M&R") == "P&M&R"
    assert parse_variant("pmr") == "P&M&R"
    assert parse_variant("m") == "M"
    assert parse_variant("P+R") == "P&R"
    with pytest.raises(InvalidComboError):
        parse_variant("R")  # mosaic requires progressive phases
    with pytest.raises(InvalidComboError):
        parse_variant("R&M")
    with pytest.raises(InvalidComboError):
        parse_variant("X")


# ---------------------------------------------------------------------------
# train command


def test_train_row_accounting(tmp_path):
    out = tmp_path / "run"
    assert run(TRAIN_FAST + ["--out", out, "--seed", 1]) == EXIT_OK
    lines = (out / "metrics.csv").read_text().strip().split("\n")
    # header + (stage_num + 1) phase rows + 1 eval row
    assert len(lines) == 1 + 4 + 1
    assert (out / "checkpoint.ckpt").exists()
    assert (out / "training_curves.png").exists()


def test_train_invalid_stage_num_exit_2(tmp_path, capsys):
    code = run(TRAIN_FAST + ["--out", tmp_path / "x", "--stage-num", 7])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "7" in err and "5" in err  # message names both values


def test_train_seed_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(TRAIN_FAST + ["--out", a, "--seed", 7]) == EXIT_OK
    assert run(TRAIN_FAST + ["--out", b, "--seed", 7]) == EXIT_OK
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.ckpt").read_bytes() == (b / "checkpoint.ckpt").read_bytes()


def test_train_missing_data_root_exit_3(tmp_path):
    code = run(["train", "--data", tmp_path / "nope", "--out", tmp_path / "o"])
    assert code == 3


def test_out_env_var_default(tmp_path, monkeypatch):
    monkeypatch.setenv("MOSAICTRAIN_OUT", str(tmp_path / "envroot"))
    assert run(TRAIN_FAST + ["--seed", 2]) == EXIT_OK
    assert (tmp_path / "envroot" / "metrics.csv").exists()


# ---------------------------------------------------------------------------
# eval / corrupt-eval / viz on a shared trained checkpoint


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    assert run(TRAIN_FAST + ["--out", out, "--seed", 3]) == EXIT_OK
    return out


def test_eval_reproduces_final_training_row(trained, tmp_path):
    out = tmp_path / "eval"
    assert run(["eval", "--checkpoint", trained / "checkpoint.ckpt",
                "--out", out, "--seed", 3,
                "--synthetic-classes", 3, "--synthetic-per-class", 4]) == EXIT_OK
    report = dict(line.split(",") for line in
                  (out / "eval_report.csv").read_text().strip().split("\n")[1:])
    final_eval = (trained / "metrics.csv").read_text().strip().split("\n")[-1].split(",")
    assert report["acc_concat"] == final_eval[4]
    assert report["acc_mix"] == final_eval[5]


def test_corrupt_eval_no_specs_clean_only(trained, tmp_path):
    out = tmp_path / "rob"
    assert run(["corrupt-eval", "--checkpoint", trained / "checkpoint.ckpt",
                "--out", out, "--seed", 3, "--corruptions", "none",
                "--synthetic-classes", 3, "--synthetic-per-class", 4]) == EXIT_OK
    lines = (out / "robustness.csv").read_text().strip().split("\n")
    assert len(lines) == 2  # header + clean row
    assert lines[1].startswith("Origin,")


def test_corrupt_eval_full_report(trained, tmp_path):
    out = tmp_path / "rob2"
    assert run(["corrupt-eval", "--checkpoint", trained / "checkpoint.ckpt",
                "--out", out, "--seed", 3,
                "--synthetic-classes", 3, "--synthetic-per-class", 4]) == EXIT_OK
    lines = (out / "robustness.csv").read_text().strip().split("\n")
    assert len(lines) == 4  # header + clean + jitter + noise
    assert (out / "robustness.txt").exists()
    assert (out / "robustness.png").exists()


def test_corrupt_eval_seed_reproducible(trained, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert run(["corrupt-eval", "--checkpoint", trained / "checkpoint.ckpt",
                    "--out", out, "--seed", 5,
                    "--synthetic-classes", 3, "--synthetic-per-class", 4]) == EXIT_OK
        outs.append((out / "robustness.csv").read_bytes())
    assert outs[0] == outs[1]


def test_viz_emits_one_map_per_stage(trained, tmp_path):
    out = tmp_path / "viz"
    assert run(["viz", "--checkpoint", trained / "checkpoint.ckpt",
                "--out", out, "--seed", 3, "--index", "0,1",
                "--synthetic-classes", 3, "--synthetic-per-class", 4]) == EXIT_OK
    pngs = sorted(p.name for p in out.glob("*.png"))
    # stage_num maps per requested index
    assert len(pngs) == 2 * 3
    assert "sample0000_stage3_cam.png" in pngs
    assert "sample0001_stage5_cam.png" in pngs


# ---------------------------------------------------------------------------
# ablate (tiny run: just the plumbing, not the science)


def test_ablate_invalid_combo_exit_2(tmp_path):
    code = run(["ablate", "--variants", "R", "--out", tmp_path / "a"])
    assert code == EXIT_CONFIG


def test_ablate_baseline_only(tmp_path):
    out = tmp_path / "abl"
    code = run(["ablate", "--variants", "baseline", "--epochs", 1,
                "--synthetic-classes", 2, "--synthetic-per-class", 4,
                "--c", 16, "--channels", "4,8,16,32,64",
                "--out", out, "--seed", 0])
    assert code == EXIT_OK
    lines = (out / "ablation.csv").read_text().strip().split("\n")
    assert len(lines) == 2
    assert lines[1].startswith("baseline,")
    assert (out / "ablation.png").exists()


def test_ablate_default_emits_six_rows(tmp_path):
    out = tmp_path / "abl6"
    code = run(["ablate", "--epochs", 1,
                "--synthetic-classes", 2, "--synthetic-per-class", 4,
                "--c", 16, "--channels", "4,8,16,32,64",
                "--out", out, "--seed", 0])
    assert code == EXIT_OK
    lines = (out / "ablation.csv").read_text().strip().split("\n")
    labels = [line.split(",")[0] for line in lines[1:]]
    assert labels == ["baseline", "M", "P", "P&M", "P&R", "P&M&R"]
    # single-head variants report no mix accuracy
    assert lines[1].endswith(",") and lines[2].endswith(",")
