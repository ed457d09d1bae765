import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scleraseg.config import (CONFIG_MAGIC, ECHO_NAME, RunConfig, echo_config,
                              read_config_file, resolve_config)
from scleraseg.errors import ConfigError, UsageError


def test_defaults():
    cfg = RunConfig()
    assert cfg.padding == (2.5, 2.0)
    assert cfg.ratio_tuple == (0.4, 0.2, 0.4)
    assert cfg.metrics_at == "original" and cfg.threshold == 0.5 and cfg.seed is None


def test_precedence_flag_over_file_over_default(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nthreshold = 0.6\nepochs = 7\nseed = 3  # inline\n")
    cfg = resolve_config(path, {"threshold": 0.7, "epochs": None})
    assert cfg.threshold == 0.7  # flag
    assert cfg.epochs == 7  # file
    assert cfg.seed == 3
    assert cfg.batch_size == 4  # default


@pytest.mark.parametrize("body", ["colour = red\n", "epochs = many\n", "deterministic = maybe\n"])
def test_bad_file_content(tmp_path, body):
    path = tmp_path / "run.cfg"
    path.write_text(body)
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_missing_file():
    with pytest.raises(ConfigError):
        read_config_file("/nonexistent/run.cfg")


@pytest.mark.parametrize("field, value", [("metrics_at", "crop"), ("threshold", 1.0),
                                          ("padding_x", 0.0), ("workers", 0),
                                          ("ratios", "0.5,0.5"), ("ratios", "a,b,c")])
def test_validation(field, value):
    with pytest.raises(ConfigError):
        RunConfig(**{field: value})


def test_config_error_is_a_usage_error():
    assert issubclass(ConfigError, UsageError)


def test_echo_round_trip(tmp_path):
    cfg = RunConfig(seed=9, learning_rate=2e-4, deterministic=False, grad_clip=None)
    target = echo_config(cfg, tmp_path, "train-seg", ["--kind", "gan"])
    assert target == tmp_path / ECHO_NAME
    lines = target.read_text().splitlines()
    assert lines[0] == CONFIG_MAGIC
    assert lines[1] == "# command: scleraseg train-seg --kind gan"
    assert resolve_config(target) == cfg


def test_echo_beside_file(tmp_path):
    out = tmp_path / "split.tsv"
    assert echo_config(RunConfig(), out) == tmp_path / "split.tsv.cfg"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.99), st.integers(1, 64), st.booleans())
def test_text_round_trip_property(seed, threshold, epochs, det):
    cfg = dataclasses.replace(RunConfig(), seed=seed, threshold=threshold, epochs=epochs,
                              deterministic=det)
    values = {}
    for line in cfg.to_text().splitlines()[1:]:
        k, _, v = line.partition(" = ")
        values[k] = v
    assert resolve_config(None, values) == cfg
