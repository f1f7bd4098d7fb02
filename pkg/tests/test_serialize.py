import numpy as np
import pytest

from msafeb.backbone import BackboneConfig
from msafeb.block import AttentionKind, MsafebConfig
from msafeb.model import assemble_model
from msafeb.serialize import (FormatError, load_checkpoint, read_features,
                              save_checkpoint, write_features)
from msafeb.tensor import Tensor


def small_model(with_msafeb=True, seed=0):
    backbone = BackboneConfig(stage_channels=(4, 8), out_channels=8,
                              input_size=(16, 16))
    block = MsafebConfig(input_channels=8, branch_filters=4, branch_dilation=1,
                         branch_groups=2, aspp_branch_channels=2,
                         fusion_channels=8,
                         attention=AttentionKind(reduction_ratio=2,
                                                 spatial_kernel=3))
    return assemble_model(backbone, block if with_msafeb else None, 3,
                          with_msafeb, seed)


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        t = Tensor(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
        path = tmp_path / "feats.msft"
        write_features(path, t)
        back = read_features(path)
        assert np.array_equal(back.data, t.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.msft"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError, match="bad magic"):
            read_features(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(1)
        t = Tensor(rng.standard_normal((1, 2, 2, 2)).astype(np.float32))
        path = tmp_path / "trunc.msft"
        write_features(path, t)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])  # one float short
        with pytest.raises(FormatError,
                           match=r"payload length mismatch: expected 32 bytes"):
            read_features(path)

    def test_wrong_rank_on_write(self, tmp_path):
        with pytest.raises(FormatError, match="rank"):
            write_features(tmp_path / "r2.msft", Tensor(np.zeros((2, 2))))

    def test_bad_version(self, tmp_path):
        import struct
        path = tmp_path / "v9.msft"
        path.write_bytes(b"MSFT" + struct.pack("<II", 9, 4)
                         + struct.pack("<4I", 1, 1, 1, 1) + bytes(4))
        with pytest.raises(FormatError, match="version"):
            read_features(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.msft"
        write_features(path, Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32)))
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            read_features(path)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        other = small_model(seed=99)  # different init
        load_checkpoint(path, other)
        for (na, a), (nb, b) in zip(model.state_stages(), other.state_stages()):
            assert na == nb
            assert np.array_equal(a, b), na

    def test_cross_architecture_rejected(self, tmp_path):
        with_block = small_model(with_msafeb=True)
        without = small_model(with_msafeb=False)
        path = tmp_path / "w.ckpt"
        save_checkpoint(with_block, path)
        with pytest.raises(FormatError, match="stage"):
            load_checkpoint(path, without)

    def test_corrupted_stage_names_offender(self, tmp_path):
        model = small_model()
        path = tmp_path / "c.ckpt"
        save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        path.write_bytes(bytes(raw[:-4]))  # truncate final stage payload
        last_stage = model.state_stages()[-1][0]
        with pytest.raises(FormatError, match=last_stage.split(".")[-1]):
            load_checkpoint(path, model)

    def test_shape_mismatch_names_stage(self, tmp_path):
        model = small_model()
        path = tmp_path / "s.ckpt"
        save_checkpoint(model, path)
        narrower = assemble_model(
            BackboneConfig(stage_channels=(4, 8), out_channels=8,
                           input_size=(16, 16)),
            MsafebConfig(input_channels=8, branch_filters=2, branch_dilation=1,
                         branch_groups=2, aspp_branch_channels=2,
                         fusion_channels=8,
                         attention=AttentionKind(reduction_ratio=2,
                                                 spatial_kernel=3)),
            3, True, 0)
        with pytest.raises(FormatError, match="dims"):
            load_checkpoint(path, narrower)

    def test_eval_reproducible_after_reload(self, tmp_path):
        from msafeb.data import to_batch
        model = small_model(seed=5)
        rng = np.random.default_rng(8)
        imgs = rng.integers(0, 256, (2, 16, 16, 3), dtype=np.uint8)
        x = to_batch(imgs)
        before = model.forward(x, train=False).data
        path = tmp_path / "e.ckpt"
        save_checkpoint(model, path)
        fresh = small_model(seed=123)
        load_checkpoint(path, fresh)
        assert np.array_equal(fresh.forward(x, train=False).data, before)
