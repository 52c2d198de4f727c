import pytest

from crossdisc.cli import cmd_gen
from crossdisc.config import Config


def tiny_config(tmp, **kw):
    base = dict(data_dir=str(tmp / "data"), out_dir=str(tmp / "run"), n_train=3, n_test=1, min_objects=1,
                max_objects=2, height=32, width=64, lidar_top_row=8, T=3, num_slots=3, dim=16, enc_width=16,
                dec_width=16, mlp_hidden=16, burn_in_steps=3, distill_steps=3, batch_size=1, min_area=4,
                conf_threshold=0.0, night_scenes=0.34)
    base.update(kw)
    return Config(**base)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(tmp)
    cmd_gen(cfg)
    return cfg


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
