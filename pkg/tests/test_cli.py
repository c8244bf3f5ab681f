import csv
import hashlib
import json

import numpy as np
import pytest

from riesznet import cli
from riesznet.config import DEFAULTS, apply_override, load_config, parse_override
from riesznet.data.imageio import read_image, read_mask, write_image
from riesznet.errors import ConfigError

SMALL = [
    "simulator.size=128", "dataset.n_images=2", "dataset.variants=1", "dataset.test_widths=[3,5]",
    "dataset.test_images=1", "dataset.test_size=128", "network.channels=[1,4,1]", "train.epochs=2",
    "train.batch_size=4", "train.pad=4", "evaluation.pad=4",
]


def run(tmp_path, command, *extra):
    args = [command, "--set", f"paths.data_dir={json.dumps(str(tmp_path / 'data'))}",
            "--set", f"paths.out_dir={json.dumps(str(tmp_path / 'run'))}"]
    for s in SMALL + list(extra):
        args += [s] if s.startswith("--") else ["--set", s]
    return cli.main(args)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.png")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert run(tmp, "generate") == 0
    assert run(tmp, "train") == 0
    return tmp


def test_generate_layout(trained):
    rows = list(csv.DictReader(open(trained / "data" / "train" / "manifest.csv")))
    assert len(rows) == 2 * 4
    assert set(rows[0]) == set(cli.MANIFEST_COLUMNS)
    assert read_image(trained / "data" / "train" / rows[0]["path"]).shape == (64, 64)
    for w in (3, 5):
        test_rows = list(csv.DictReader(open(trained / "data" / "test" / f"w{w}" / "manifest.csv")))
        assert len(test_rows) == 1 and test_rows[0]["width"] == str(w)
    assert (trained / "data" / "resolved_config.json").exists()


def test_generate_is_deterministic(trained, tmp_path):
    assert run(tmp_path, "generate") == 0
    assert digest(tmp_path / "data") == digest(trained / "data")


def test_generate_rejects_zero_width(tmp_path, capsys):
    assert run(tmp_path, "generate", "simulator.width=0") == 2
    assert "width" in capsys.readouterr().err


def test_train_outputs(trained):
    rows = list(csv.DictReader(open(trained / "run" / "losses.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    for name in ("best.rzn", "last.rzn", "final.rzn", "resolved_config.json"):
        assert (trained / "run" / name).exists()


def test_train_resume(trained, tmp_path):
    import shutil
    shutil.copytree(trained / "data", tmp_path / "data")
    assert run(tmp_path, "train", "train.epochs=1") == 0
    assert run(tmp_path, "train", "--resume") == 0
    rows = list(csv.DictReader(open(tmp_path / "run" / "losses.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert (tmp_path / "run" / "final.rzn").read_bytes() == (trained / "run" / "final.rzn").read_bytes()


def test_resume_without_checkpoint(trained, tmp_path):
    import shutil
    shutil.copytree(trained / "data", tmp_path / "data")
    assert cli.main(["train", "--resume", "--set", f"paths.data_dir={json.dumps(str(tmp_path / 'data'))}",
                     "--set", f"paths.out_dir={json.dumps(str(tmp_path / 'none'))}"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(trained, tmp_path, capsys):
    import shutil
    shutil.copytree(trained / "data", tmp_path / "data")
    assert run(tmp_path, "train", "train.initial_lr=1e300") == 3
    assert "numeric" in capsys.readouterr().err


def test_eval_one_row_per_width(trained):
    assert run(trained, "eval") == 0
    rows = list(csv.DictReader(open(trained / "run" / "scale_sweep.csv")))
    assert [r["width"] for r in rows] == ["3", "5"]
    assert all(0 <= float(r["dice"]) <= 1 for r in rows)


def test_predict_writes_mask(trained, tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (40, 56)).astype(np.uint8)
    write_image(tmp_path / "x.png", img)
    code = cli.main(["predict", "--set", f"paths.out_dir={json.dumps(str(tmp_path / 'pred'))}",
                     "--set", f"paths.checkpoint={json.dumps(str(trained / 'run' / 'final.rzn'))}",
                     "--set", f"paths.input={json.dumps(str(tmp_path / 'x.png'))}", "--set", "evaluation.pad=4"])
    assert code == 0
    outs = sorted(p.name for p in (tmp_path / "pred").glob("*_mask.png"))
    assert outs == ["x_mask.png"]
    assert read_mask(tmp_path / "pred" / "x_mask.png").shape == img.shape


def test_predict_missing_input(trained, tmp_path):
    code = cli.main(["predict", "--set", f"paths.checkpoint={json.dumps(str(trained / 'run' / 'final.rzn'))}",
                     "--set", f"paths.out_dir={json.dumps(str(tmp_path / 'pred'))}",
                     "--set", f"paths.input={json.dumps(str(tmp_path / 'missing.png'))}"])
    assert code == 2


def test_equivariance_unit_factor(tmp_path):
    code = cli.main(["equivariance", "--set", f"paths.out_dir={json.dumps(str(tmp_path))}",
                     "--set", "evaluation.factors=[1]", "--set", "evaluation.n_images=1", "--set", "evaluation.seeds=1",
                     "--set", "evaluation.image_size=64", "--set", "network.channels=[1,4,1]"])
    assert code == 0
    lines = (tmp_path / "equivariance.csv").read_text().splitlines()
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 1 and float(rows[0]["mean"]) == 0.0


def test_unknown_key_exit_code(tmp_path, capsys):
    assert cli.main(["generate", "--set", "train.learning_rate=1"]) == 2
    assert "learning_rate" in capsys.readouterr().err


# -- config ------------------------------------------------------------------


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 4, "train": {"epochs": 7}}))
    cfg = load_config(tmp_path / "c.json", ["train.epochs=9", "dataset.kind=\"mnist\""])
    assert cfg["seed"] == 4 and cfg["train"]["epochs"] == 9 and cfg["dataset"]["kind"] == "mnist"
    assert cfg["train"]["batch_size"] == DEFAULTS["train"]["batch_size"]
    assert DEFAULTS["train"]["epochs"] == 50


def test_config_rejects_unknown_keys(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epoch": 7}}))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        load_config(None, ["nope=1"])
    with pytest.raises(ConfigError):
        parse_override("no_equals")


def test_override_parses_json_or_string():
    assert parse_override("train.epochs=3") == (["train", "epochs"], 3)
    assert parse_override("dataset.test_widths=[1, 2]") == (["dataset", "test_widths"], [1, 2])
    assert parse_override("dataset.kind=mnist") == (["dataset", "kind"], "mnist")
    cfg = load_config()
    apply_override(cfg, ["train", "loss"], "softmax-ce")
    assert cfg["train"]["loss"] == "softmax-ce"
    with pytest.raises(ConfigError):
        apply_override(cfg, ["train"], 1)
