import json

import numpy as np
import pytest

from conftest import make
from layered_jscc.checkpoint import METADATA_FILE, save_checkpoint
from layered_jscc.cli import main
from layered_jscc.config import ConfigError, parse_config
from layered_jscc.evaluation import SweepResult
from layered_jscc.schemes import LayerPlan, SchemeKind

TINY = """\
scheme: multi_decoder
layers:
  ratios: ["1/12", "1/12"]
channel:
  snr_db: 10
optimizer:
  batch_size: 16
  max_epochs: 1
dataset:
  name: synthetic
  synthetic_count: 40
  test_size: 6
seed: 3
"""


def write(tmp_path, text, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("{}")
        assert cfg.scheme is SchemeKind.MULTI_DECODER
        assert cfg.layer_plan() == LayerPlan((256, 256), 3072)
        assert cfg.optimizer.learning_rate == 1e-3 and cfg.optimizer.batch_size == 64
        assert cfg.evaluation.test_snrs_db == [1, 4, 7, 10, 13, 16, 19, 22, 25]

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config("optimizer:\n  learning_rte: 0.1\n")
        fld, line, _ = info.value.problems[0]
        assert fld == "optimizer.learning_rte" and line == 2

    def test_negative_learning_rate_names_field_and_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config("seed: 1\noptimizer:\n  learning_rate: -0.1\n", "bad.yaml")
        assert "optimizer.learning_rate" in str(info.value)
        assert "bad.yaml:3" in str(info.value)

    def test_layers_need_exactly_one_form(self):
        with pytest.raises(ConfigError):
            parse_config("layers:\n  ratios: ['1/12']\n  bandwidths: [256]\n")
        with pytest.raises(ConfigError):
            parse_config("layers:\n  ratios: ['1/7']\n")

    def test_yaml_round_trip(self):
        cfg = parse_config(TINY)
        assert parse_config(cfg.to_yaml()) == cfg

    def test_train_config(self):
        tcfg = parse_config(TINY).train_config()
        assert tcfg.scheme_kind is SchemeKind.MULTI_DECODER
        assert tcfg.seed == 3 and tcfg.optimizer.max_epochs == 1


class TestTrainCommand:
    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = write(tmp_path, "optimizer:\n  learning_rate: -1\n", "bad.yaml")
        assert main(["train", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "optimizer.learning_rate" in err and "bad.yaml:2" in err

    def test_dry_run(self, tmp_path, capsys):
        path = write(tmp_path, TINY + f"output_dir: {tmp_path / 'out'}\n")
        assert main(["train", "--config", str(path), "--dry-run"]) == 0
        out = capsys.readouterr().out
        assert "learning_rate: 0.001" in out
        assert "# parameter_count: 228310" in out
        assert not (tmp_path / "out").exists()

    def test_train_writes_checkpoint(self, tmp_path):
        path = write(tmp_path, TINY)
        out = tmp_path / "run"
        assert main(["train", "--config", str(path), "--output", str(out)]) == 0
        meta = json.loads((out / "checkpoint" / METADATA_FILE).read_text())
        assert meta["model"]["kind"] == "multi_decoder"
        assert (out / "checkpoint" / "history.jsonl").exists()
        resolved = parse_config((out / "config.resolved.yaml").read_text())
        assert resolved.output_dir == str(out) and resolved.seed == 3
        assert len((out / "train_log.jsonl").read_text().splitlines()) == 1


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("ck")
    model = make("multi_decoder", LayerPlan((256, 256), 3072), seed=1)
    return save_checkpoint(model, None, root / "checkpoint",
                           extra={"train_config": {"dataset": {"name": "synthetic", "synthetic_count": 20,
                                                               "test_size": 4}}})


class TestSweepCommand:
    def test_default_grid(self, checkpoint, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["sweep", str(checkpoint), "--realizations", "1", "--output", str(out)]) == 0
        assert SweepResult.load(out).test_snrs_db == [1, 4, 7, 10, 13, 16, 19, 22, 25]

    def test_snrs_flag(self, checkpoint, tmp_path):
        out = tmp_path / "s.csv"
        main(["sweep", str(checkpoint), "--snrs", "5,10,15", "--realizations", "1", "--output", str(out)])
        sw = SweepResult.load(out)
        assert sw.test_snrs_db == [5.0, 10.0, 15.0]
        assert sw.extra["seed"] == 0 and sw.extra["dataset"] == "synthetic"

    def test_byte_identical(self, checkpoint, tmp_path):
        outs = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for out in outs:
            assert main(["sweep", str(checkpoint), "--snrs", "4,16", "--realizations", "1", "--seed", "7",
                         "--output", str(out)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert (tmp_path / "a.csv.meta.json").read_text().replace("a.csv", "") == \
            (tmp_path / "b.csv.meta.json").read_text().replace("b.csv", "")

    def test_schema_mismatch_hint(self, checkpoint, tmp_path, capsys):
        import shutil
        bad = tmp_path / "old"
        shutil.copytree(checkpoint, bad)
        meta = json.loads((bad / METADATA_FILE).read_text())
        meta["schema_version"] = 0
        (bad / METADATA_FILE).write_text(json.dumps(meta))
        assert main(["sweep", str(bad), "--realizations", "1"]) == 3
        assert "retrain" in capsys.readouterr().err

    def test_usage_error(self, checkpoint):
        with pytest.raises(SystemExit) as info:
            main(["sweep", str(checkpoint), "--realizations", "0"])
        assert info.value.code == 2


def sweep_file(path, values, scheme="multi_decoder", snrs=(1.0, 4.0, 7.0), variant=""):
    values = np.asarray(values, dtype=float)
    sw = SweepResult(f"{scheme}_{path.stem}", scheme, 10.0, "awgn", list(snrs), values,
                     np.full_like(values, 0.1), 1, variant=variant, num_images=10)
    return sw.save(path)


def csv_curves(path):
    lines = path.read_text().splitlines()[1:]
    return len({line.rsplit(",", 3)[0] for line in lines})


class TestPlotCommand:
    def test_layers_with_baseline(self, tmp_path):
        two = sweep_file(tmp_path / "two.csv", [[20, 22, 24], [22, 24, 26]])
        base = sweep_file(tmp_path / "base.csv", [[23, 25, 27]], "single_layer_baseline")
        out = tmp_path / "fig.svg"
        assert main(["plot", str(two), str(base), "--output", str(out)]) == 0
        assert out.read_text().lstrip().startswith("<?xml")
        assert csv_curves(tmp_path / "fig.csv") == 3

    def test_envelope(self, tmp_path):
        five = sweep_file(tmp_path / "five.csv", [[20 + i, 21 + i, 22 + i] for i in range(5)])
        out = tmp_path / "env.svg"
        assert main(["plot", str(five), "--mode", "envelope", "--output", str(out)]) == 0
        assert csv_curves(tmp_path / "env.csv") == 1

    def test_residual_m(self, tmp_path):
        files = [sweep_file(tmp_path / f"r{v}.csv", [[20, 21, 22], [21, 22, 23]], "residual", variant=v)
                 for v in ("m=1", "m=10", "m=100", "perfect")]
        out = tmp_path / "m.svg"
        assert main(["plot", *map(str, files), "--mode", "residual-m", "--output", str(out)]) == 0
        assert csv_curves(tmp_path / "m.csv") == 4

    def test_independence(self, tmp_path):
        files = [sweep_file(tmp_path / f"L{n}.csv", [[20 + j, 21, 22] for j in range(n)]) for n in (2, 3)]
        out = tmp_path / "ind.pdf"
        assert main(["plot", *map(str, files), "--mode", "independence", "--snr", "4",
                     "--output", str(out)]) == 0
        assert out.read_bytes()[:4] == b"%PDF"
        assert csv_curves(tmp_path / "ind.csv") == 2

    def test_plot_is_reproducible(self, tmp_path):
        f = sweep_file(tmp_path / "a.csv", [[20, 22, 24]])
        main(["plot", str(f), "--output", str(tmp_path / "x.svg")])
        main(["plot", str(f), "--output", str(tmp_path / "y.svg")])
        assert (tmp_path / "x.svg").read_bytes() == (tmp_path / "y.svg").read_bytes()


class TestCompareCommand:
    def test_self(self, tmp_path, capsys):
        f = sweep_file(tmp_path / "a.csv", [[20, 22, 24]])
        assert main(["compare", str(f), str(f)]) == 0
        rows = capsys.readouterr().out.splitlines()[1:4]
        assert [float(r.split(",")[1]) for r in rows] == [0.0, 0.0, 0.0]

    def test_baseline_gap(self, tmp_path, capsys):
        base = sweep_file(tmp_path / "base.csv", [[23, 25, 27]], "single_layer_baseline")
        two = sweep_file(tmp_path / "two.csv", [[20, 22, 24], [22, 24.5, 26.75]])
        assert main(["compare", str(base), str(two), "--layer-b", "2"]) == 0
        out = capsys.readouterr().out
        assert out.strip().endswith("# max_abs_gap_db,1.000000")

    def test_grid_mismatch(self, tmp_path, capsys):
        a = sweep_file(tmp_path / "a.csv", [[20, 22, 24]])
        b = sweep_file(tmp_path / "b.csv", [[20, 22, 24]], snrs=(2.0, 4.0, 7.0))
        assert main(["compare", str(a), str(b)]) == 3
        assert "grid" in capsys.readouterr().err.lower()
