import pytest
import torch

from wda.config import desk_preset
from wda.data import SynthConfig, synth_domain_pair


def tiny_cfg(**overrides):
    """A few-iteration configuration on 64 x 64 synthetic images."""
    cfg = desk_preset().replace(**{
        "synth.hw": (64, 64), "synth.n_source": 4, "synth.n_target_train": 4, "synth.n_target_test": 2,
        "synth.semi_axes": (4.0, 8.0), "synth.instances": (2, 5),
        "optim.patch_hw": (32, 32), "optim.max_iters": 6, "optim.z_max": 4, "optim.source_iters": 6,
        "optim.counter_iters": 4, "augment.cp.crop_hw": (16, 16), "eval.tile_hw": (64, 64),
        "eval.overlap": 32,
    })
    return cfg.replace(**overrides)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_data():
    return synth_domain_pair(tiny_cfg().synth, 0)


@pytest.fixture(scope="session")
def tiny_ckpts(tmp_path_factory, tiny_data):
    from wda import train as T
    d = tmp_path_factory.mktemp("tiny")
    cfg = tiny_cfg()
    src = T.train_source(cfg, tiny_data[0], d, "source")
    g2 = T.train_counter(cfg, tiny_data[0], src, d, "counter")
    return cfg, src, g2


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance pass/fail lines at the end of the run."""
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
