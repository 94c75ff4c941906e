import hashlib

import numpy as np
import pytest
import torch

from vcmr.errors import ConfigError, InvalidInputError, ShapeError
from vcmr.models import (
    DEFAULT_CHANNELS,
    Projector,
    ProjectorConfig,
    SampleCNN,
    SampleCNNConfig,
    TagHead,
    TagHeadConfig,
    VideoEncoder,
    VideoEncoderConfig,
    count_parameters,
    freeze_blocks,
    resolution_calculus,
    resolution_table,
    trainable_parameter_count,
)

from conftest import TINY
from oracles import samplecnn_param_count

TINY_ENC = dict(first_kernel=1, stem_channels=TINY["stem_channels"], channel_schedule=TINY["channel_schedule"])


def _hash(module):
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class TestResolutionCalculus:
    @pytest.mark.parametrize("k", range(1, 9))
    def test_samples_are_k_times_3_pow_9(self, k):
        samples, seconds = resolution_calculus(SampleCNNConfig(first_kernel=k))
        assert samples == k * 19683 == k * 3**9
        assert seconds == samples / 16000

    def test_paper_durations(self):
        table = {k: (n, s) for k, n, s in resolution_table()}
        assert table[3][0] == 59049 and round(table[3][1], 2) == 3.69
        assert table[5][0] == 98415 and round(table[5][1], 2) == 6.15
        np.testing.assert_allclose(table[3][1], 3.6906, atol=5e-5)
        np.testing.assert_allclose(table[5][1], 6.1509, atol=5e-5)

    def test_table_uses_base_config(self):
        base = SampleCNNConfig(**TINY_ENC)
        assert [k for k, _, _ in resolution_table(range(2, 4), base)] == [2, 3]

    @pytest.mark.parametrize("k", range(1, 9))
    def test_forward_emits_one_vector(self, k):
        enc = SampleCNN(SampleCNNConfig(**{**TINY_ENC, "first_kernel": k})).eval()
        n = k * 19683
        with torch.no_grad():
            out = enc(torch.zeros(2, n))
        assert out.shape == (2, 512)
        for bad in (n - 1, n + 1):
            with pytest.raises(ShapeError):
                enc(torch.zeros(1, bad))

    def test_default_encoder_forward(self):
        enc = SampleCNN().eval()
        with torch.no_grad():
            out = enc(torch.randn(98415))
        assert out.shape == (1, 512)
        with pytest.raises(ShapeError):
            enc(torch.randn(98414))

    def test_accepts_channel_dim(self):
        enc = SampleCNN(SampleCNNConfig(**TINY_ENC)).eval()
        with torch.no_grad():
            assert enc(torch.zeros(3, 1, 19683)).shape == (3, 512)


class TestParameterBudget:
    def test_default_within_budget(self):
        n = count_parameters(SampleCNNConfig())
        assert n == 2_614_144
        assert abs(n - 2.6e6) <= 0.15 * 2.6e6

    def test_closed_form_matches_instantiated(self):
        for cfg in (SampleCNNConfig(), SampleCNNConfig(**TINY_ENC), SampleCNNConfig(first_kernel=3)):
            assert count_parameters(cfg) == trainable_parameter_count(SampleCNN(cfg))

    def test_matches_layer_walk_oracle(self):
        cfg = SampleCNNConfig()
        assert count_parameters(cfg) == samplecnn_param_count(5, 128, DEFAULT_CHANNELS)

    def test_single_block_by_hand(self):
        # 1 -> 1 channel, width 3: 3 weights + 1 bias + 2 batch-norm parameters
        cfg = SampleCNNConfig(first_kernel=1, n_blocks=1, stem_channels=1, channel_schedule=(1,), out_dim=1)
        stem = 1 * 1 * 1 + 1 + 2
        assert count_parameters(cfg) - stem == 3 + 1 + 2

    def test_doubling_channels_roughly_quadruples(self):
        base = SampleCNNConfig(out_dim=512)
        double = SampleCNNConfig(
            stem_channels=256, channel_schedule=tuple(2 * c for c in DEFAULT_CHANNELS), out_dim=1024
        )
        ratio = count_parameters(double) / count_parameters(base)
        assert 3.95 < ratio < 4.0

    def test_bad_schedule(self):
        with pytest.raises(ConfigError):
            SampleCNNConfig(channel_schedule=(128,) * 8)
        with pytest.raises(ConfigError):
            SampleCNNConfig(channel_schedule=(128,) * 9)
        with pytest.raises(ConfigError):
            SampleCNNConfig(first_kernel=0)

    def test_config_round_trip(self):
        cfg = SampleCNNConfig(**TINY_ENC)
        assert SampleCNNConfig.from_dict(cfg.to_dict()) == cfg


class TestFreezing:
    def test_freeze_four_blocks_one_step(self):
        torch.manual_seed(0)
        enc = freeze_blocks(SampleCNN(SampleCNNConfig(**TINY_ENC)), 4)
        frozen = [enc.stem, *enc.blocks[:4]]
        before = [_hash(m) for m in frozen]
        live_before = _hash(enc.blocks[4])
        opt = torch.optim.Adam([p for p in enc.parameters() if p.requires_grad], lr=1e-2)
        enc.train()
        enc(torch.randn(4, 19683)).pow(2).mean().backward()
        opt.step()
        assert [_hash(m) for m in frozen] == before
        assert _hash(enc.blocks[4]) != live_before

    def test_frozen_batchnorm_stays_in_eval(self):
        enc = freeze_blocks(SampleCNN(SampleCNNConfig(**TINY_ENC)), 2)
        enc.train()
        assert not enc.stem.training and not enc.blocks[1].training
        assert enc.blocks[2].training

    def test_trainable_count_drops(self):
        enc = SampleCNN(SampleCNNConfig(**TINY_ENC))
        total = trainable_parameter_count(enc)
        freeze_blocks(enc, 9)
        assert trainable_parameter_count(enc) == 0
        freeze_blocks(enc, 0)
        assert trainable_parameter_count(enc) == total

    @pytest.mark.parametrize("n", [-1, 10])
    def test_out_of_range(self, n):
        with pytest.raises(InvalidInputError):
            freeze_blocks(SampleCNN(SampleCNNConfig(**TINY_ENC)), n)


class TestVideoEncoder:
    def test_seven_second_slice(self):
        out = VideoEncoder()(torch.randn(1, 7, 512))
        assert out.shape == (1, 512)

    def test_padding_ignored(self):
        torch.manual_seed(0)
        enc = VideoEncoder(VideoEncoderConfig(hidden_dim=16)).eval()
        x = torch.randn(1, 5, 512)
        padded = torch.cat([x, torch.full((1, 3, 512), 9.0)], dim=1)
        with torch.no_grad():
            a = enc(x)
            b = enc(padded, torch.tensor([5]))
        np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-6)

    def test_mean_readout(self):
        enc = VideoEncoder(VideoEncoderConfig(hidden_dim=16, readout="mean"))
        assert enc(torch.randn(2, 4, 512), torch.tensor([4, 2])).shape == (2, 512)

    def test_empty_sequence(self):
        with pytest.raises(InvalidInputError):
            VideoEncoder(VideoEncoderConfig(hidden_dim=8))(torch.randn(1, 0, 512))
        with pytest.raises(InvalidInputError):
            VideoEncoder(VideoEncoderConfig(hidden_dim=8))(torch.randn(1, 2, 512), torch.tensor([0]))

    def test_config_guards(self):
        with pytest.raises(ConfigError):
            VideoEncoderConfig(n_layers=3)
        with pytest.raises(ConfigError):
            VideoEncoderConfig(readout="max")
        with pytest.raises(ConfigError):
            VideoEncoderConfig(input_scale="unit")

    def test_input_scaling(self):
        torch.manual_seed(0)
        scaled = VideoEncoder(VideoEncoderConfig(hidden_dim=16)).eval()
        plain = VideoEncoder(VideoEncoderConfig(hidden_dim=16, input_scale="none")).eval()
        plain.load_state_dict(scaled.state_dict())
        x = torch.nn.functional.normalize(torch.randn(2, 3, 512), dim=-1)
        with torch.no_grad():
            np.testing.assert_allclose(scaled(x).numpy(), plain(x * 512**0.5).numpy(), rtol=1e-5, atol=1e-6)


class TestHeads:
    def test_projector_dims(self):
        assert Projector()(torch.randn(3, 512)).shape == (3, 128)
        with pytest.raises(ConfigError):
            ProjectorConfig(proj_dim=512)

    @pytest.mark.parametrize("n_tags", [50, 57])
    def test_tag_head(self, n_tags):
        head = TagHead(TagHeadConfig(n_tags=n_tags))
        e = torch.randn(4, 512)
        s = head.scores(e)
        assert s.shape == (4, n_tags)
        assert torch.all((s > 0) & (s < 1))
        np.testing.assert_array_equal(s.detach().numpy(), torch.sigmoid(head(e)).detach().numpy())
