import json
import os

import numpy as np
import pytest

from fedbcs.checkpoint import load_checkpoint
from fedbcs.cli import main, parse_config, serialize_config
from fedbcs.errors import ConfigError

SMALL = """
[federation]
method = fedbcs
client_count = 2
rounds = 1
image_size = 16
train_per_client = 4
test_per_client = 2
batch_size = 2
seed = 3

[output]
directory = {out}
"""


class TestConfigFormat:
    def test_round_trip_is_identity(self):
        first = parse_config(SMALL.format(out="runs/x"))
        again = parse_config(serialize_config(first))
        assert again == first

    def test_bad_value_names_line_and_field(self):
        text = "[federation]\nmethod = fedbcs\nrounds = sixty\n"
        with pytest.raises(ConfigError, match="line 3.*'rounds'.*sixty"):
            parse_config(text)

    def test_unknown_field_and_section(self):
        with pytest.raises(ConfigError, match="unknown field 'bogus'"):
            parse_config("[federation]\nbogus = 1\n")
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config("[extras]\nx = 1\n")

    def test_defaults_when_sections_missing(self):
        cfg = parse_config("")
        assert cfg.federation.method == "fedbcs"
        assert cfg.out_dir == "runs/latest"


class TestBounds:
    def test_worked_example_verbatim(self, capsys):
        code = main(["bounds", "--l-sm", "10", "--sigma-sq", "0.1", "--g", "1",
                     "--tau", "0.4", "--lambda-c", "0.01", "--local-steps", "1",
                     "--eta", "0.01", "--delta", "1", "--epsilon", "0.05",
                     "--grad-sq-sum", "1"])
        out = capsys.readouterr().out
        assert code == 0
        assert "eta_max = 0.177273" in out
        assert "T = 5715" in out
        assert "lambda_c_max (descent) = 0.4" in out
        assert "lambda_c_max (convergence) = 0.02" in out

    def test_regime_violation_exits_4(self, capsys):
        code = main(["bounds", "--l-sm", "10", "--sigma-sq", "0.1", "--g", "1",
                     "--tau", "0.4", "--lambda-c", "0.5",
                     "--delta", "1", "--epsilon", "0.05"])
        err = capsys.readouterr().err
        assert code == 4
        assert "lambda_c < tau*epsilon/G" in err


class TestFinch:
    def test_partition_printout(self, tmp_path, capsys):
        pts = tmp_path / "pts.txt"
        pts.write_text("1.0 0.1\n0.9 0.2\n-1.0 0.0\n-0.9 -0.1\n")
        code = main(["finch", str(pts)])
        out = capsys.readouterr().out
        assert code == 0
        assert "4 points -> 2 clusters" in out
        assert "cluster 0: 0 1" in out
        assert "cluster 1: 2 3" in out

    def test_missing_file_exits_2(self, capsys):
        code = main(["finch", "/definitely/not/here.txt"])
        assert code == 2
        assert "config error" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_all_pass_exit_0(self, capsys):
        code = main(["gradcheck"])
        out = capsys.readouterr().out
        assert code == 0
        assert "gradient checks passed" in out
        assert "FAIL" not in out

    def test_absurd_tolerance_exits_3(self, capsys):
        code = main(["gradcheck", "--tolerance", "1e-15"])
        assert code == 3
        assert "FAIL" in capsys.readouterr().out


class TestRunCommand:
    def test_run_writes_artifacts(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg.write_text(SMALL.format(out=out))
        code = main(["run", "--config", str(cfg)])
        printed = capsys.readouterr().out
        assert code == 0
        assert "avg" in printed and "fedbcs" in printed
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["round"] == 0
        state = load_checkpoint(out / "final.fbcs1")
        assert all(np.all(np.isfinite(v)) for v in state.values())

    def test_flag_overrides_and_env(self, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text(SMALL.format(out=tmp_path / "from_config"))
        env_out = tmp_path / "from_env"
        monkeypatch.setenv("FEDBCS_OUT", str(env_out))
        code = main(["run", "--config", str(cfg), "--method", "fedavg",
                     "--out", str(tmp_path / "from_flag")])
        printed = capsys.readouterr().out
        assert code == 0
        assert "fedavg" in printed
        assert env_out.is_dir()
        assert not (tmp_path / "from_flag").exists()
        assert not (tmp_path / "from_config").exists()

    def test_bad_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[federation]\nrounds = sixty\n")
        code = main(["run", "--config", str(cfg)])
        assert code == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
