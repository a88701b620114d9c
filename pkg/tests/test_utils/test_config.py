from pathlib import Path

import pytest

from dfpt.utils.config import ConfigDict, load_config, parse_config_text, save_config


def test_missing_sections_autovivify():
    config = ConfigDict()
    config["bench"]["sweep"]["gaps"] = [1.0, 0.1]
    assert config["bench"]["sweep"]["gaps"] == [1.0, 0.1]
    assert isinstance(config["adapt"]["limits"], ConfigDict)
    assert config.unused() == []


def test_from_dict_wraps_sections_and_stringifies_keys():
    config = ConfigDict.from_dict(
        {"ecut": 20, "model": {"cell_length": 6.28}, "modes": [1, -1], 7: "seven"}
    )
    assert config["ecut"] == 20
    assert config["modes"] == [1, -1]
    assert config["7"] == config[7] == "seven"
    assert isinstance(config["model"], ConfigDict)
    assert config["model"]["cell_length"] == 6.28
    assert isinstance(config["solver"]["options"], ConfigDict)


def test_unread_keys_are_reported_and_cleaned():
    config = ConfigDict.from_dict(
        {
            "temperature": 0.01,
            "temprature": 0.02,
            "solver": {"tol": 1e-9, "maxiter": 50},
            "bench": {"sweep": {"ecut": 20, "seeds": 3}},
        }
    )
    assert config["temperature"] == 0.01
    assert config["solver"]["tol"] == 1e-9
    assert config["bench"]["sweep"]["ecut"] == 20

    assert sorted(config.unused()) == [
        "bench.sweep.seeds",
        "solver.maxiter",
        "temprature",
    ]

    config.clean()
    assert set(config) == {"temperature", "solver", "bench"}
    assert set(config["solver"]) == {"tol"}
    assert set(config["bench"]["sweep"]) == {"ecut"}


def test_get_and_require():
    config = ConfigDict.from_dict({"temperature": 0.01})
    assert config.get("temperature") == 0.01
    assert config.get("smearing", "fermi-dirac") == "fermi-dirac"
    assert "smearing" not in config
    with pytest.raises(ValueError, match="smearing"):
        config.require("smearing")


def test_parse_config_text():
    config = parse_config_text(
        """
        # free particles
        cell_length = 6.283185307179586
        ecut = 20
        smearing = fermi-dirac
        potential = [(1, 0.5, 0.0), (-1, 0.5, 0.0)]
        bench.gaps = [1, 0.1]   # trailing comment
        """
    )
    assert config["ecut"] == 20
    assert config["smearing"] == "fermi-dirac"
    assert config["potential"][0] == (1, 0.5, 0.0)
    assert config["bench"]["gaps"] == [1, 0.1]


@pytest.mark.parametrize(
    "text",
    [
        "ecut 20",
        "= 3",
        "ecut = [1,",
        "ecut = 1\necut = 2",
        "bench = 1\nbench.gaps = [1]",
    ],
)
def test_parse_config_text_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_config_file_round_trip(tmp_path: Path):
    original = {
        "ecut": 20.0,
        "n_el": 3,
        "smearing": "gaussian",
        "bench": {"gaps": [1.0, 0.1]},
    }
    path = tmp_path / "configs" / "run.cfg"
    save_config(ConfigDict.from_dict(original), path)
    assert path.exists()

    loaded = load_config(path)
    assert loaded["ecut"] == 20.0
    assert loaded["smearing"] == "gaussian"
    assert loaded["bench"]["gaps"] == [1.0, 0.1]
    # Defaults fill in what the file leaves out, without marking it read
    assert loaded["seed"] == ConfigDict.DEFAULTS["seed"]
    assert "seed" not in load_config(path, defaults={})

    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.cfg")
