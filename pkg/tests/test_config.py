from pathlib import Path

import pytest

from nerfloc.config import load_run_config, parse_pairs
from nerfloc.errors import UnknownConfigKey

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_and_overrides():
    cfg = load_run_config(overrides=["seed=4", "nerf.epochs=3", "matcher.encoder_widths=8,8,16,16",
                                     "localize.fallback_to_retrieval=off", "refine.mode=off"])
    assert cfg.seed == 4 and cfg.nerf.epochs == 3
    assert cfg.matcher.encoder_widths == (8, 8, 16, 16)
    assert cfg.localize.fallback_to_retrieval is False and cfg.refine.mode == "off"


@pytest.mark.parametrize("item", ["nerf.bogus=1", "nope.epochs=1", "epochs=1", "a.b.c=1"])
def test_unknown_keys_raise(item):
    with pytest.raises(UnknownConfigKey):
        load_run_config(overrides=[item])


def test_invalid_values_raise():
    with pytest.raises(ValueError):
        load_run_config(overrides=["refine.mode=sideways"])
    with pytest.raises(ValueError):
        load_run_config(overrides=["localize.fallback_to_retrieval=maybe"])
    with pytest.raises(ValueError):
        load_run_config(overrides=["seed"])


def test_parse_pairs_comments_and_errors():
    assert parse_pairs("# c\n\na = 1  # trailing\nb=x=y\n") == [("a", "1"), ("b", "x=y")]
    with pytest.raises(ValueError):
        parse_pairs("no equals sign")


def test_echo_round_trips(tmp_path):
    cfg = load_run_config(CONFIGS / "desk_mini.conf", ["nerf.epochs=2"])
    path = cfg.write_echo(tmp_path)
    again = load_run_config(path)
    assert again.items() == cfg.items()
    assert path.read_text() == again.to_text()


@pytest.mark.parametrize("name", ["desk_mini.conf", "desk_full.conf"])
def test_shipped_configs_parse(name):
    cfg = load_run_config(CONFIGS / name)
    assert cfg.matcher.temperature == 0.05 and cfg.evaluate.t_thresh_diameter_fraction == 0.05
