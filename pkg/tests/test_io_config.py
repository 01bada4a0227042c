import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from u2a.config import RunConfig, load_config
from u2a.errors import ConfigError, FormatError
from u2a.io import (
    atomic_write_text,
    config_hash,
    dumps17,
    read_json,
    read_sequences,
    rng_stream,
    write_csv,
    write_sequences,
)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_dumps17_round_trips_every_float(x):
    assert json.loads(dumps17({"x": x}))["x"] == x


def test_dumps17_structure_and_rejections():
    doc = {"a": [1, 2.5], "b": np.array([[0.1, 0.2]]), "c": None, "d": True, "e": "s"}
    assert json.loads(dumps17(doc, indent=1)) == {"a": [1, 2.5], "b": [[0.1, 0.2]], "c": None, "d": True, "e": "s"}
    with pytest.raises(ValueError):
        dumps17(math.nan)
    with pytest.raises(TypeError):
        dumps17(object())


def test_atomic_write_leaves_no_temp_on_failure(tmp_path):
    path = tmp_path / "x.txt"
    atomic_write_text(path, "old")

    with pytest.raises(TypeError):
        atomic_write_text(path, 123)
    assert path.read_text() == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]


def test_sequence_and_csv_files(tmp_path):
    write_sequences(tmp_path / "s.jsonl", [[1, 2], [0]])
    assert (tmp_path / "s.jsonl").read_text() == '{"tokens": [1, 2]}\n{"tokens": [0]}\n'
    assert read_sequences(tmp_path / "s.jsonl") == [[1, 2], [0]]
    (tmp_path / "bad.jsonl").write_text('{"tokens": [1, 0.5]}\n')
    with pytest.raises(FormatError):
        read_sequences(tmp_path / "bad.jsonl")
    with pytest.raises(FormatError):
        read_json(tmp_path / "missing.json")
    write_csv(tmp_path / "t.csv", ["a", "b", "c"], [[1, 0.1, None], [True, 2.0, "x"]])
    assert (tmp_path / "t.csv").read_text() == "a,b,c\n1,0.10000000000000001,\n1,2,x\n"


def test_config_hash_and_streams():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16
    a = rng_stream(3, "train").random(4)
    assert np.array_equal(a, rng_stream(3, "train").random(4))
    assert not np.array_equal(a, rng_stream(3, "prefs").random(4))
    assert not np.array_equal(a, rng_stream(4, "train").random(4))


def test_run_config_defaults_and_keys():
    cfg = RunConfig()
    d = cfg.to_dict()
    assert d["lambda"] == 1.0 and d["beta"] == 0.5 and d["delta"] == 0.01 and d["T"] == 100
    assert d["outer_lr"] == 3e-2 and d["k_percent"] == 20.0
    assert RunConfig.from_dict(d) == cfg
    assert cfg.hash() == RunConfig().hash()
    assert cfg.hash() != cfg.merged({"beta": 0.25}).hash()
    u = cfg.u2a()
    assert u.inner.lam == 1.0 and u.outer.beta == 0.5 and u.T == 100


@pytest.mark.parametrize(
    "bad",
    [{"alpha": 1.0}, {"T": 2.5}, {"T": True}, {"beta": "0.5"}, {"forget_loss": "dpo"}, {"k_percent": 0}, {"T": 0}],
)
def test_run_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_flags_win_over_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"lambda": 2.0, "beta": 0.1, "seed": 9}))
    cfg = load_config(path, {"beta": 0.3, "seed": None})
    assert (cfg.lam, cfg.beta, cfg.seed) == (2.0, 0.3, 9)
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text('{"lambda": 1.0, "mystery": 3}')
    with pytest.raises(ConfigError):
        load_config(path)
