import csv
import json

import pytest
import tomli

from dckd.cli import main
from dckd.config import DEFAULTS, config_digest, dump_toml, load_config, parse_value, shipped_config
from dckd.errors import ConfigError
from dckd.experiments import BASE, NAMED_GRIDS, ExperimentGrid, render_table

from conftest import TINY


def sets(*extra):
    out = []
    for item in list(TINY) + list(extra):
        out += ["--set", item]
    return out


# ---------------------------------------------------------------------------
# config

def test_defaults_validate():
    cfg = load_config()
    assert cfg == DEFAULTS
    assert cfg["dcr"]["degradation_policy"] == "noise"


def test_parse_value_types():
    assert parse_value("5") == 5
    assert parse_value("0.1") == 0.1
    assert parse_value("mix") == "mix"
    assert parse_value("[0.5, 0.9]") == [0.5, 0.9]
    assert parse_value("true") is True


def test_override_and_digest():
    a = load_config(None, ["dcr.num_negatives=3"])
    assert a["dcr"]["num_negatives"] == 3
    assert config_digest(a) != config_digest(load_config())
    assert config_digest(a) == config_digest(load_config(None, ["dcr.num_negatives=3"]))


@pytest.mark.parametrize("override, fragment", [
    ("dcr.nope=1", "unknown config key"),
    ("dcr.num_negatives=zero", "dcr.num_negatives"),
    ("dcr.alpha=1.5", "dcr.alpha"),
    ("dcr.degradation_policy=jpeg", "dcr.degradation_policy"),
    ("loss.lambda_dcl=-1", "loss.lambda_dcl"),
    ("train.patch_size=64", "train.patch_size"),
    ("dcr.step_growth=0.5", "dcr.step_growth"),
])
def test_invalid_configs(override, fragment):
    with pytest.raises(ConfigError, match=fragment.replace(".", r"\.")):
        load_config(None, [override])


def test_config_file_and_roundtrip(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('name = "x"\n[loss]\nlambda_ce = 0.01\n')
    cfg = load_config(path)
    assert cfg["name"] == "x" and cfg["loss"]["lambda_ce"] == 0.01
    assert tomli.loads(dump_toml(cfg)) == cfg
    path.write_text("[loss\n")
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize("name", ["smoke.toml", "csd_fixed_bound.toml"])
def test_shipped_configs_load(name):
    cfg = load_config(shipped_config(name))
    assert cfg["name"]


# ---------------------------------------------------------------------------
# grids

def test_named_grid_cells():
    base = load_config()
    counts = {name: len(g.expand(base)) for name, g in NAMED_GRIDS.items()}
    assert counts == {"components": 4, "degradation": 4, "weights": 6, "weights_product": 9, "negatives": 4,
                      "initial_step": 3}
    assert NAMED_GRIDS["components"].expand(base) == [
        {"loss.lambda_dcl": 0.0, "loss.lambda_ce": 0.0}, {"loss.lambda_dcl": 0.0, "loss.lambda_ce": 0.001},
        {"loss.lambda_dcl": 0.1, "loss.lambda_ce": 0.0}, {"loss.lambda_dcl": 0.1, "loss.lambda_ce": 0.001}]
    assert [c["dcr.initial_step"] for c in NAMED_GRIDS["initial_step"].expand(base)] == [100, 1000, 10000]


def test_grid_product_order_and_base_placeholder():
    g = ExperimentGrid("g", [("dcr.alpha", [BASE, 0.5]), ("dcr.num_negatives", [1, 2])])
    assert g.expand(load_config()) == [
        {"dcr.alpha": 0.1, "dcr.num_negatives": 1}, {"dcr.alpha": 0.1, "dcr.num_negatives": 2},
        {"dcr.alpha": 0.5, "dcr.num_negatives": 1}, {"dcr.alpha": 0.5, "dcr.num_negatives": 2}]


def _fake_rows(cells):
    return [{"overrides": c, "psnr": 30.0 + i, "ssim": 0.9, "status": "ok"} for i, c in enumerate(cells)]


def test_table_shapes():
    base = load_config()
    comp = render_table(NAMED_GRIDS["components"], _fake_rows(NAMED_GRIDS["components"].expand(base)))
    assert comp.splitlines()[0].split(" | ")[:2] == ["DCR", "DMM"]
    assert len(comp.strip().splitlines()) == 2 + 4
    deg = render_table(NAMED_GRIDS["degradation"], _fake_rows(NAMED_GRIDS["degradation"].expand(base)))
    assert [ln.split(" | ")[0].strip() for ln in deg.strip().splitlines()[2:]] == [
        "Random Blur", "Random Noise", "Random Resize", "Random Mix"]
    w = render_table(NAMED_GRIDS["weights"], _fake_rows(NAMED_GRIDS["weights"].expand(base)))
    blocks = [b for b in w.split("\n\n") if b.strip()]
    assert len(blocks) == 2
    assert blocks[0].splitlines()[0].split(" | ")[0].strip() == "loss.lambda_dcl"
    assert all(len(b.strip().splitlines()) == 3 for b in blocks)
    wp = render_table(NAMED_GRIDS["weights_product"], _fake_rows(NAMED_GRIDS["weights_product"].expand(base)))
    assert len(wp.strip().splitlines()) == 2 + 3
    assert len(wp.splitlines()[0].split(" | ")) == 4


# ---------------------------------------------------------------------------
# commands

def _metrics(run_dir):
    with open(run_dir / "metrics.csv") as fh:
        return {r["model"]: r for r in csv.DictReader(fh)}


def test_run_is_reproducible(tmp_path, capsys):
    assert main(["run", *sets(), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", *sets(), "--out", str(tmp_path / "b")]) == 0
    a, b = _metrics(tmp_path / "a"), _metrics(tmp_path / "b")
    assert set(a) == {"student_init", "student", "teacher"}
    for model in a:
        assert (a[model]["psnr"], a[model]["ssim"]) == (b[model]["psnr"], b[model]["ssim"])
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"config", "config_digest", "environment", "metrics", "checksums_before"} <= set(manifest)
    assert (tmp_path / "a" / "config.toml").exists()
    assert "PSNR" in capsys.readouterr().out


def test_gen_corpus_and_eval(tmp_path, capsys):
    assert main(["gen-corpus", str(tmp_path / "corpus"), "--count", "2", "--size", "32"]) == 0
    assert len(list((tmp_path / "corpus").glob("*.png"))) == 2
    assert main(["run", *sets(), "--out", str(tmp_path / "r")]) == 0
    ckpt = tmp_path / "r" / "checkpoints" / "student.npz"
    capsys.readouterr()
    assert main(["eval", str(ckpt), "--corpus", str(tmp_path / "corpus"), "--mode", "RGB"]) == 0
    assert "PSNR" in capsys.readouterr().out
    assert main(["eval", str(ckpt), *sets()]) == 0


def test_ablate_custom_axis(tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", *sets(), "--axis", "dcr.num_negatives=1,2", "--mode", "sweep", "--out", str(out)])
    assert code == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["dcr.num_negatives"] for r in rows] == ["1", "2"]
    assert all(r["status"] == "ok" for r in rows)
    assert (out / "table.txt").exists() and list(out.glob("plot_*.png"))


def test_compare_methods(tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--methods", "logits,dckd", *sets(), "--out", str(out)]) == 0
    text = (out / "report.txt").read_text()
    assert "logits" in text and "dckd" in text
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[0]["d_psnr"]) == 0.0


def test_config_error_exit_code(capsys):
    assert main(["run", "--set", "dcr.alpha=2"]) == 2
    assert "dcr.alpha" in capsys.readouterr().err
    assert main(["ablate", *sets()]) == 2


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for cmd in ("run", "ablate", "compare", "eval", "gen-corpus"):
        assert cmd in out
