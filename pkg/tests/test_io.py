import json

import numpy as np
import pytest
import torch

from kneeuda.checkpoint import (
    Checkpoint,
    arrays_to_state,
    load_checkpoint,
    save_checkpoint,
    state_to_arrays,
)
from kneeuda.errors import CheckpointError, ManifestMalformed
from kneeuda.networks import Encoder3D, EncoderConfig, Head
from kneeuda.phenotype import PhenotypeLabel
from kneeuda.volumes import SegmentationMask, VolumeSample, load_volume, save_volume


def tiny_encoder(seed=0):
    torch.manual_seed(seed)
    cfg = EncoderConfig(input_shape=(12, 12, 8), block_layers=(1,),
                        growth_rate=2, init_channels=4, stem_kernel=3)
    return Encoder3D(cfg), cfg


def make_sample(sample_id="s0001", with_mask=True, with_label=True, shape=(6, 5, 4)):
    rng = np.random.default_rng(0)
    voxels = rng.normal(size=shape).astype(np.float32)
    mask = None
    if with_mask:
        mask = SegmentationMask((rng.integers(0, 7, shape)).astype(np.uint16))
    label = PhenotypeLabel(cartilage_meniscus=True, subchondral_bone=False) \
        if with_label else None
    return VolumeSample(voxels=voxels, spacing=(0.5, 0.5, 1.0), domain="target",
                        sample_id=sample_id, mask=mask, label=label)


class TestVolumeIO:
    def test_round_trip_bit_exact(self, tmp_path):
        s = make_sample()
        path = save_volume(s, tmp_path)
        back = load_volume(path)
        np.testing.assert_array_equal(back.voxels, s.voxels)
        np.testing.assert_array_equal(back.mask.labels, s.mask.labels)
        assert back.spacing == s.spacing
        assert back.domain == s.domain
        assert back.sample_id == s.sample_id
        assert back.label == s.label

    def test_round_trip_without_mask_or_label(self, tmp_path):
        s = make_sample(with_mask=False, with_label=False)
        back = load_volume(save_volume(s, tmp_path))
        assert back.mask is None and back.label is None

    def test_dotted_sample_id(self, tmp_path):
        s = make_sample(sample_id="site1.knee.07")
        back = load_volume(save_volume(s, tmp_path))
        assert back.sample_id == "site1.knee.07"
        np.testing.assert_array_equal(back.voxels, s.voxels)

    def test_truncated_blob_rejected(self, tmp_path):
        path = save_volume(make_sample(), tmp_path)
        blob = tmp_path / "s0001.vol.f32"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ManifestMalformed):
            load_volume(path)

    def test_missing_header_rejected(self, tmp_path):
        with pytest.raises(ManifestMalformed):
            load_volume(tmp_path / "nope.json")

    def test_stripped_removes_label_only(self):
        s = make_sample()
        t = s.stripped()
        assert t.label is None
        assert s.label is not None
        np.testing.assert_array_equal(t.voxels, s.voxels)

    def test_validation(self):
        with pytest.raises(ValueError):
            VolumeSample(np.zeros((2, 2, 2), np.float32), (1, 1, 1), "other", "x")
        with pytest.raises(ValueError):
            VolumeSample(np.zeros((2, 2, 2), np.float32), (1, 0, 1), "source", "x")
        with pytest.raises(ValueError):
            SegmentationMask(np.full((2, 2, 2), 99, np.uint16))
        with pytest.raises(ValueError):
            VolumeSample(np.zeros((2, 2, 2), np.float32), (1, 1, 1), "source", "x",
                         mask=SegmentationMask(np.zeros((3, 3, 3), np.uint16)))


class TestCheckpointIO:
    def test_module_round_trip_bit_exact(self, tmp_path):
        enc, _ = tiny_encoder()
        head = Head(enc.feature_dim)
        # run a forward pass in train mode so batchnorm buffers are nontrivial
        enc.train()
        enc(torch.randn(2, 12, 12, 8))
        ckpt = Checkpoint(encoder=state_to_arrays(enc), head=state_to_arrays(head),
                          metadata={"note": "fixture"})
        back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "ck"))
        for group_name, arrays in ckpt.groups().items():
            loaded = getattr(back, group_name)
            assert set(loaded) == set(arrays)
            for name in arrays:
                assert loaded[name].dtype == arrays[name].dtype, name
                np.testing.assert_array_equal(loaded[name], arrays[name])
        assert back.metadata == {"note": "fixture"}
        assert back.discriminator is None

    def test_int_buffers_restore_dtype(self, tmp_path):
        enc, _ = tiny_encoder()
        enc.train()
        enc(torch.randn(2, 12, 12, 8))
        arrays = state_to_arrays(enc)
        tracked = [n for n in arrays if n.endswith("num_batches_tracked")]
        assert tracked and arrays[tracked[0]].dtype == np.int64
        ckpt = Checkpoint(encoder=arrays, head={"fc.weight": np.zeros((1, 2), np.float32),
                                                "fc.bias": np.zeros(1, np.float32)})
        back = load_checkpoint(save_checkpoint(ckpt, tmp_path / "ck"))
        assert back.encoder[tracked[0]].dtype == np.int64
        assert back.encoder[tracked[0]] == arrays[tracked[0]]

    def test_reload_into_module_preserves_outputs(self, tmp_path):
        enc, cfg = tiny_encoder()
        head = Head(enc.feature_dim)
        ckpt = Checkpoint(encoder=state_to_arrays(enc), head=state_to_arrays(head))
        save_checkpoint(ckpt, tmp_path / "ck")
        enc2 = Encoder3D(cfg)
        arrays_to_state(enc2, load_checkpoint(tmp_path / "ck").encoder)
        enc.eval(), enc2.eval()
        x = torch.randn(1, 12, 12, 8)
        with torch.no_grad():
            torch.testing.assert_close(enc(x), enc2(x), rtol=0, atol=0)

    def test_name_mismatch_rejected(self):
        enc, _ = tiny_encoder()
        arrays = state_to_arrays(enc)
        arrays["bogus"] = np.zeros(1, np.float32)
        with pytest.raises(CheckpointError):
            arrays_to_state(enc, arrays)

    def test_shape_mismatch_rejected(self):
        enc, _ = tiny_encoder()
        arrays = state_to_arrays(enc)
        name = next(iter(arrays))
        arrays[name] = np.zeros(np.asarray(arrays[name]).size + 1, np.float32)
        with pytest.raises(CheckpointError):
            arrays_to_state(enc, arrays)

    def test_missing_directory_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent")

    def test_corrupt_header_rejected(self, tmp_path):
        d = tmp_path / "ck"
        d.mkdir()
        (d / "header.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(d)

    def test_header_is_stable_json(self, tmp_path):
        enc, _ = tiny_encoder()
        ckpt = Checkpoint(encoder=state_to_arrays(enc),
                          head={"fc.weight": np.zeros((1, 2), np.float32),
                                "fc.bias": np.zeros(1, np.float32)})
        save_checkpoint(ckpt, tmp_path / "a")
        save_checkpoint(ckpt, tmp_path / "b")
        assert (tmp_path / "a" / "header.json").read_bytes() == \
               (tmp_path / "b" / "header.json").read_bytes()
        json.loads((tmp_path / "a" / "header.json").read_text())
