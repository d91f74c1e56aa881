import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mfbnet import config, serialize
from mfbnet.config import RunConfig
from mfbnet.errors import ConfigurationError, InputError


def test_defaults_round_trip():
    c = RunConfig()
    assert config.parse(config.emit(c)) == c


@given(st.integers(0, 2**31), st.floats(1e-9, 1.0), st.booleans(), st.sampled_from(["mfb", "mlb", "mcb", "concat"]),
       st.text(alphabet="abcxyz ./", max_size=10).map(str.strip))
def test_parse_emit_round_trip(seed, tol, pn, fusion, label):
    c = RunConfig(seed=seed, tol=tol, power_norm=pn, fusion=fusion, label=label)
    assert config.parse(config.emit(c)) == c


def test_emit_is_canonical():
    text = "# comment\n\n  fusion=mlb \nseed = 3\n"
    once = config.emit(config.parse(text))
    assert config.emit(config.parse(once)) == once
    assert once.splitlines()[0].startswith("seed = 3")


def test_every_key_documented():
    d = config.docs()
    assert list(d) == config.KEYS
    assert all(doc.strip() for _, doc in d.values())


@pytest.mark.parametrize("text", ["bogus = 1", "seed = 1\nseed = 2", "seed", "= 4", "seed = x",
                                  "power_norm = yes", "tol = abc"])
def test_rejects_bad_text(text):
    with pytest.raises(ConfigurationError):
        config.parse(text)


def test_missing_keys_take_defaults():
    assert config.parse("k = 3") == RunConfig(k=3)


def test_shipped_configs_parse():
    import pathlib
    root = pathlib.Path(__file__).resolve().parent.parent / "configs"
    files = sorted(root.glob("*.txt"))
    assert files
    for f in files:
        config.load(f)


arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                    elements=st.floats(allow_nan=False, width=64))


@given(st.dictionaries(st.text(min_size=1, max_size=8), arrays, max_size=4))
def test_model_file_round_trip_bitwise(tensors):
    back = serialize.loads(serialize.dumps(tensors))
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == np.ascontiguousarray(arr).tobytes()


def test_model_file_layout():
    blob = serialize.dumps({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"MFBW" and blob[4] == 1
    assert len(blob) == 4 + 1 + 4 + 4 + 1 + 4 + 16 + 16


def test_model_file_rejects_corruption():
    blob = serialize.dumps({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(InputError, match="magic"):
        serialize.loads(b"XXXX" + blob[4:])
    for cut in (3, 8, 12, len(blob) - 1):
        with pytest.raises(InputError):
            serialize.loads(blob[:cut])
    with pytest.raises(InputError, match="trailing"):
        serialize.loads(blob + b"\0")
    bad_version = bytearray(blob)
    bad_version[4] = 9
    with pytest.raises(InputError, match="version"):
        serialize.loads(bytes(bad_version))


def test_save_load_file(tmp_path):
    p = tmp_path / "m.bin"
    serialize.save(p, {"a": np.eye(2)})
    np.testing.assert_array_equal(serialize.load(p)["a"], np.eye(2))
