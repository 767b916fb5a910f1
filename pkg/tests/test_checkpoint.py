import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mce_fss import checkpoint as ckpt
from mce_fss.data import SyntheticTaskConfig, generate_dataset, heldout_pool, sample_episode, split_folds
from mce_fss.model import FewShotSegmenter, ModelConfig

TINY = ModelConfig(backbone_widths=(8, 8, 8), stem_width=8, token_dim=8, cross_channels=8,
                   aspp_channels=8, decoder_channels=8, seed=5)


@pytest.fixture(scope="module")
def episode():
    ds = generate_dataset(SyntheticTaskConfig(image_size=16, samples_per_class=4, radius=(0.32, 0.4)))
    return sample_episode(ds, heldout_pool(ds, split_folds()[0]), 1, np.random.default_rng(0))


@pytest.fixture
def blob():
    model = FewShotSegmenter(TINY)
    return ckpt.encode(ckpt.from_model(model, fingerprint=0xDEADBEEF))


class TestRoundTrip:
    def test_predictions_bit_identical(self, episode, tmp_path):
        model = FewShotSegmenter(TINY)
        for p in model.parameters():
            p.data += 0.01  # anything but the seeded initialization
        with_probs = model.episode_forward(episode).probs.data
        path = tmp_path / "m.mcec"
        ckpt.save_checkpoint(model, path, fingerprint=7)
        loaded = ckpt.load_checkpoint(path)
        assert loaded.cfg == model.cfg
        assert loaded.episode_forward(episode).probs.data.tobytes() == with_probs.tobytes()
        assert np.array_equal(loaded.predict(episode), model.predict(episode))

    def test_header_fields(self, blob):
        ck = ckpt.decode(blob)
        assert ck.fingerprint == 0xDEADBEEF and ck.seed == 5 and ck.version == ckpt.VERSION
        assert blob[:4] == b"MCEC"

    def test_float32_model(self, tmp_path):
        from dataclasses import replace
        model = FewShotSegmenter(replace(TINY, dtype="float32"))
        ckpt.save_checkpoint(model, tmp_path / "f32.mcec")
        loaded = ckpt.load_checkpoint(tmp_path / "f32.mcec")
        for k, v in model.state_dict().items():
            got = loaded.state_dict()[k]
            assert got.dtype == np.float32 and got.tobytes() == v.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.text(min_size=1, max_size=12).filter(lambda s: s != ckpt.CONFIG_RECORD),
                           arrays(st.sampled_from([np.float64, np.float32]), array_shapes(max_dims=4, max_side=4)),
                           max_size=4),
           st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    def test_arbitrary_records(self, params, fingerprint, seed):
        ck = ckpt.Checkpoint(params, {"a": [1, 2]}, fingerprint, seed)
        out = ckpt.decode(ckpt.encode(ck))
        assert out.fingerprint == fingerprint and out.seed == seed and out.config == {"a": [1, 2]}
        assert set(out.params) == set(params)
        for k, v in params.items():
            assert out.params[k].dtype == v.dtype and out.params[k].tobytes() == v.tobytes()


class TestCorruption:
    def test_flipped_byte_is_checksum_error(self, blob):
        for pos in (30, len(blob) // 2, len(blob) - 10):
            bad = bytearray(blob)
            bad[pos] ^= 0x40
            with pytest.raises(ckpt.CheckpointChecksumError):
                ckpt.decode(bytes(bad))

    def test_truncated(self, blob):
        for n in (10, 40, len(blob) // 2, len(blob) - 1):
            with pytest.raises(ckpt.CheckpointTruncatedError):
                ckpt.decode(blob[:n])

    def test_version_mismatch(self):
        ck = ckpt.from_model(FewShotSegmenter(TINY))
        ck.version = 99
        with pytest.raises(ckpt.CheckpointVersionError, match="99"):
            ckpt.decode(ckpt.encode(ck))

    def test_bad_magic(self, blob):
        with pytest.raises(ckpt.CheckpointFormatError):
            ckpt.decode(b"NOPE" + blob[4:])

    def test_errors_are_distinct(self):
        kinds = [ckpt.CheckpointChecksumError, ckpt.CheckpointTruncatedError,
                 ckpt.CheckpointVersionError, ckpt.CheckpointFormatError]
        for a in kinds:
            for b in kinds:
                assert (a is b) == issubclass(a, b)

    def test_state_mismatch(self):
        ck = ckpt.from_model(FewShotSegmenter(TINY))
        del ck.params["head.cls.bias"]
        from mce_fss.tensor import ContractError
        with pytest.raises(ContractError, match="missing"):
            ckpt.to_model(ck)
