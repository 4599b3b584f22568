import struct

import numpy as np
import pytest

from protodistill import checkpoint as C
from protodistill import train
from protodistill.config import TrainConfig


@pytest.fixture
def trained(tiny_cfg, tiny_corpus):
    return train.pretrain(tiny_cfg.replace(epochs=1), tiny_corpus)


class TestFormat:
    def test_header_layout(self, trained):
        raw = trained.to_bytes()
        assert raw[:8] == b"PROSCKPT"
        assert struct.unpack("<I", raw[8:12])[0] == C.VERSION
        (clen,) = struct.unpack("<I", raw[12:16])
        assert raw[16:16 + clen].decode("utf-8") == trained.config_text

    def test_save_load_save_is_byte_identical(self, trained, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        C.save_checkpoint(trained, a)
        C.save_checkpoint(C.load_checkpoint(a), b)
        assert a.read_bytes() == b.read_bytes()

    def test_roundtrip_values(self, trained, tmp_path):
        path = tmp_path / "x.ckpt"
        C.save_checkpoint(trained, path)
        back = C.load_checkpoint(path)
        assert (back.step, back.epoch, back.optim_step) == (trained.step, trained.epoch, trained.optim_step)
        np.testing.assert_array_equal(back.prototypes, trained.prototypes)
        for k, v in trained.student.items():
            np.testing.assert_array_equal(back.student[k], v)
        assert back.metrics == trained.metrics

    @pytest.mark.parametrize("cut", [1, 7, 100, 1000])
    def test_truncation_is_a_checksum_error(self, trained, tmp_path, cut):
        raw = trained.to_bytes()
        path = tmp_path / "t.ckpt"
        path.write_bytes(raw[:-cut])
        with pytest.raises(C.ChecksumError):
            C.load_checkpoint(path)

    def test_flipped_byte_names_the_section(self, trained, tmp_path):
        raw = bytearray(trained.to_bytes())
        idx = raw.find(b"\x0a\x00prototypes") + 12 + 9  # past name and dims
        raw[idx] ^= 0xFF
        path = tmp_path / "f.ckpt"
        path.write_bytes(bytes(raw))
        with pytest.raises(C.ChecksumError, match="prototypes"):
            C.load_checkpoint(path)

    def test_bad_magic_and_version(self, trained):
        raw = trained.to_bytes()
        with pytest.raises(C.CheckpointError, match="magic"):
            C.Checkpoint.from_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(C.CheckpointError, match="version"):
            C.Checkpoint.from_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])

    def test_wrong_prototype_count_names_prototypes(self, trained, tiny_cfg, tmp_path):
        path = tmp_path / "k.ckpt"
        C.save_checkpoint(trained, path)
        other = tiny_cfg.replace(num_prototypes=tiny_cfg.num_prototypes + 2)
        with pytest.raises(C.ShapeMismatchError, match="prototypes"):
            C.load_checkpoint(path, train.expected_shapes(other))

    def test_stored_values_are_float32(self, trained):
        for v in trained.student.values():
            np.testing.assert_array_equal(v, C.to_f32(v))

    def test_atomic_write_leaves_no_temp_file(self, tmp_path):
        C.atomic_write(tmp_path / "out.bin", b"abc")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["out.bin"]


def test_encoder_output_survives_roundtrip(trained, tmp_path):
    from protodistill import config as config_mod
    from protodistill import vit

    path = tmp_path / "e.ckpt"
    C.save_checkpoint(trained, path)
    back = C.load_checkpoint(path)
    enc = config_mod.loads(trained.config_text).encoder()
    img = np.random.default_rng(0).random((3, enc.image_side, enc.image_side))
    a = vit.encode(train.teacher_params(trained), enc, img).data
    b = vit.encode(train.teacher_params(back), enc, img).data
    np.testing.assert_array_equal(a, b)
