import numpy as np
import pytest

from discorl import container
from discorl.nn import Network


def test_roundtrip_mixed_dtypes(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3), "frames": np.arange(24, dtype=np.uint8).reshape(2, 3, 4),
              "s": np.array(3.5)}
    path = container.save(tmp_path / "a.bin", arrays, "test", meta={"x": 1})
    header, back = container.load(path)
    assert header["kind"] == "test" and header["meta"] == {"x": 1}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype if v.dtype == np.uint8 else back[k].dtype == np.float64
        np.testing.assert_array_equal(back[k], v)


def test_header_layout(tmp_path):
    data = container.pack({"a": np.ones(2)}, "x")
    assert data[:4] == b"DCRL"
    assert int.from_bytes(data[4:8], "little") == container.FORMAT_VERSION
    assert data[-16:] == np.ones(2, dtype="<f8").tobytes()


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:-3],
    lambda d: d + b"\0",
    lambda d: d[:4] + (99).to_bytes(4, "little") + d[8:],
])
def test_corrupt_files_rejected(mutate):
    data = container.pack({"a": np.ones(3)}, "x")
    with pytest.raises(container.ContainerError):
        container.unpack(mutate(data))


def test_network_roundtrip_bit_identical(tmp_path):
    net = Network([{"type": "conv", "in_ch": 3, "out_ch": 4, "kernel": 3, "stride": 2}, {"type": "flatten"},
                   {"type": "dense", "in": 36, "out": 4}], (8, 8, 3), seed=5)
    container.save_network(tmp_path / "n.bin", net)
    back, _ = container.load_network(tmp_path / "n.bin")
    assert back.get_flat().tobytes() == net.get_flat().tobytes()
    x = np.random.default_rng(0).normal(size=(2, 8, 8, 3))
    np.testing.assert_array_equal(back.forward(x), net.forward(x))


def test_atomic_write_leaves_no_temp(tmp_path):
    container.atomic_write_text(tmp_path / "f.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]
