import numpy as np
import pytest

from partrf import engine
from partrf.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from partrf.engine import Value


class TestContainer:
    def test_round_trip_f64_bitwise(self, rng, tmp_path):
        params = [
            ("grid.values", rng.normal(size=(3, 4, 2))),
            ("mlp.w", rng.normal(size=(5, 6))),
            ("bias", rng.normal(size=6)),
        ]
        p = tmp_path / "a.ckpt"
        save_checkpoint(p, params, {"note": "hello world", "res": 7})
        meta, back = load_checkpoint(p)
        assert meta == {"note": "hello world", "res": "7"}
        assert list(back) == ["grid.values", "mlp.w", "bias"]
        for (name, arr) in params:
            assert back[name].dtype == np.float64
            assert (back[name] == arr).all()

    def test_accepts_value_objects(self, rng, tmp_path):
        v = Value(rng.normal(size=(2, 2)), requires_grad=True)
        p = tmp_path / "v.ckpt"
        save_checkpoint(p, [("v", v)])
        _, back = load_checkpoint(p)
        assert (back["v"] == v.data).all()

    def test_f32_round_trip(self, rng, tmp_path):
        engine.set_default_dtype(np.float32)
        arr = rng.normal(size=(4, 3)).astype(np.float32)
        p = tmp_path / "f32.ckpt"
        save_checkpoint(p, [("x", arr)])
        meta, back = load_checkpoint(p)
        assert back["x"].dtype == np.float32
        assert (back["x"] == arr).all()

    def test_header_is_plain_text_with_version(self, rng, tmp_path):
        p = tmp_path / "h.ckpt"
        save_checkpoint(p, [("w", np.zeros((2, 3)))], {"k": "v"})
        head = p.read_bytes().split(b"end = header\n")[0].decode("ascii")
        lines = head.splitlines()
        assert lines[0] == "version = mp-ckpt-v1"
        assert "dtype = float64" in lines
        assert "meta.k = v" in lines
        assert "param = w 2 3" in lines

    def test_little_endian_payload(self, tmp_path):
        p = tmp_path / "le.ckpt"
        save_checkpoint(p, [("x", np.array([1.0]))])
        raw = p.read_bytes()
        payload = raw.split(b"end = header\n", 1)[1]
        assert payload == np.array([1.0], dtype="<f8").tobytes()

    def test_bad_version_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"version = mp-ckpt-v9\ndtype = float64\nend = header\n")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        p = tmp_path / "t.ckpt"
        save_checkpoint(p, [("x", np.zeros(8))])
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_mixed_dtypes_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="mixed"):
            save_checkpoint(tmp_path / "m.ckpt",
                            [("a", np.zeros(2, dtype=np.float64)),
                             ("b", np.zeros(2, dtype=np.float32))])

    def test_whitespace_name_rejected(self, tmp_path):
        with pytest.raises(CheckpointError, match="name"):
            save_checkpoint(tmp_path / "w.ckpt", [("bad name", np.zeros(2))])

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "tr.ckpt"
        save_checkpoint(p, [("x", np.zeros(2))])
        with open(p, "ab") as fh:
            fh.write(b"junk")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(p)
