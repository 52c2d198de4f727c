import pytest

from crossdisc.config import Config, ConfigError, apply_pairs, dump_config, load_config, parse_bands


def test_defaults_and_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nlr = 0.01\nnight_motion = yes\n\nbands = 0-5,5-9  # trailing\n")
    cfg = load_config(p, ["seed=4"])
    assert cfg.lr == 0.01 and cfg.night_motion is True and cfg.seed == 4
    assert cfg.band_list() == [(0.0, 5.0), (5.0, 9.0)]
    assert load_config().keep_rate == 0.996


def test_dump_round_trips():
    cfg = Config(seed=9, completion=False, tau=0.7)
    assert apply_pairs(Config(), dump_config(cfg).splitlines()) == cfg


@pytest.mark.parametrize("line", ["nope = 1", "lr = fast", "completion = maybe", "just text"])
def test_bad_lines_are_rejected(line):
    with pytest.raises(ConfigError):
        apply_pairs(Config(), [line])


def test_missing_file_and_bad_bands(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.txt")
    for text in ("5-1", "3", "a-b"):
        with pytest.raises(ConfigError):
            parse_bands(text)
