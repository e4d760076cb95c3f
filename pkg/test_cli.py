import json
import math

import pytest

from nodal_lab.errors import ConfigError
from nodal_lab.main import parse_config, run
from nodal_lab.schemas import Command, OutputFormat

CIRCLE_RUN = """
[domain]
kind = "Rectangle"
extents = [2.0, 2.0]
origin = [-1.0, -1.0]

[field]
kind = "circle"
center = [0.0123, -0.0171]
radius = 0.5

[direction]
kind = "polynomial"
exponents = [[0, 0]]
coeffs = [1.0]
"""


@pytest.fixture
def circle_config(tmp_path):
    path = tmp_path / "circle.toml"
    path.write_text(CIRCLE_RUN)
    return path


def test_defaults():
    config = parse_config()
    assert config.resolution == 128
    assert config.samples == 1000
    assert config.seed == 0
    assert config.format == OutputFormat.JSON
    assert config.command is None


def test_overrides_win_over_the_file(circle_config):
    config = parse_config(circle_config, {"resolution": 32, "command": "volume", "seed": None})
    assert config.resolution == 32
    assert config.seed == 0
    assert config.command == Command.VOLUME
    assert config.field.radius == 0.5


def test_negative_resolution_names_the_field():
    with pytest.raises(ConfigError, match="resolution"):
        parse_config(overrides={"resolution": -4})


def test_unknown_model_lists_valid_names(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('[model]\nname = "Brownian"\n')
    with pytest.raises(ConfigError) as info:
        parse_config(path)
    assert "ArithmeticWave" in info.value.message
    assert "LinearField" in info.value.message


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "absent.toml")


def test_volume_csv_is_reproducible(circle_config, tmp_path):
    out = tmp_path / "out"
    argv = [
        "volume",
        "--config", str(circle_config),
        "--resolution", "64",
        "--format", "csv",
        "--output-dir", str(out),
    ]
    assert run(argv) == 0
    first = (out / "volume.csv").read_bytes()
    assert run(argv) == 0
    assert (out / "volume.csv").read_bytes() == first

    lines = first.decode().splitlines()
    assert lines[0].startswith("# metadata: ")
    metadata = json.loads(lines[0][len("# metadata: "):])
    assert metadata["command"] == "volume"
    assert metadata["package"] == "nodal-volume-lab"
    assert lines[1].split(",")[:3] == ["resolution", "spacing", "volume"]
    last = lines[-1].split(",")
    assert float(last[2]) == pytest.approx(math.pi, rel=1e-3)


def test_variation_with_oracle(circle_config, tmp_path):
    out = tmp_path / "out"
    code = run(["variation", "--config", str(circle_config), "--resolution", "128", "--fd", "--output-dir", str(out)])
    assert code == 0
    document = json.loads((out / "variation.json").read_text())
    result = document["result"]
    # circle of radius 1/2 shrinking under h = 1: dL/ds = -pi / r
    assert result["total"] == pytest.approx(-2 * math.pi, rel=1e-3)
    assert result["fd_gap"] is not None
    assert result["fd_gap"] <= 1e-2
    assert "cm_norm_sq" not in result
    assert document["metadata"]["config"]["fd"] is True


def test_config_error_exit_code(tmp_path):
    out = tmp_path / "out"
    assert run(["volume", "--resolution", "-4", "--output-dir", str(out)]) == 2
    record = json.loads((out / "error.json").read_text())
    assert record["error"] == "ConfigError"
    assert record["exit_code"] == 2
    assert "resolution" in record["message"]


def test_model_command_without_model(tmp_path):
    out = tmp_path / "out"
    assert run(["kacrice", "--output-dir", str(out)]) == 2
    assert json.loads((out / "error.json").read_text())["operation"] == "dispatch"
