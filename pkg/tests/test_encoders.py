import math

import numpy as np
import pytest
import torch

from ecgtext.encoders import (EcgEncoder, EcgEncoderConfig, EcgProjectionHead,
                              TextEncoder, TextEncoderConfig, TextProjectionHead)
from helpers import finite_difference_check, tiny_ecg_config, tiny_text_config


class TestEcgEncoder:
    def test_stride_arithmetic_default_conv_stack(self):
        config = EcgEncoderConfig(n_layers=1, in_channels=12)
        assert config.stride_product == 40
        assert config.output_length(5000) == 125
        torch.manual_seed(0)
        model = EcgEncoder(config).eval()
        with torch.no_grad():
            out = model(torch.randn(1, 5000, 12))
        assert out.shape == (1, 125, 768)

    def test_floor_division_on_odd_lengths(self):
        config = tiny_ecg_config()
        torch.manual_seed(0)
        model = EcgEncoder(config).eval()
        for length in (40, 41, 43, 47):
            expected = (length // 2) // 2
            assert config.output_length(length) == expected
            with torch.no_grad():
                out = model(torch.randn(1, length, 2))
            assert out.shape == (1, expected, 8)

    def test_conv_underflow(self):
        config = tiny_ecg_config()
        model = EcgEncoder(config)
        with pytest.raises(ValueError, match="conv underflow"):
            model(torch.randn(1, 3, 2))
        with pytest.raises(ValueError, match="conv underflow"):
            config.output_length(3)

    def test_attention_rows_sum_to_one(self):
        config = tiny_ecg_config()
        torch.manual_seed(1)
        model = EcgEncoder(config).eval()
        model.blocks[0].attn.store_attention = True
        with torch.no_grad():
            model(torch.randn(2, 40, 2))
        attn = model.blocks[0].attn.last_attention
        assert attn is not None
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)

    def test_eval_determinism(self):
        torch.manual_seed(2)
        model = EcgEncoder(tiny_ecg_config()).eval()
        x = torch.randn(2, 40, 2)
        with torch.no_grad():
            first = model(x)
            second = model(x)
        assert torch.equal(first, second)

    def test_gradient_check(self):
        torch.manual_seed(3)
        model = EcgEncoder(tiny_ecg_config()).double()
        x = torch.randn(2, 40, 2, dtype=torch.float64)

        def loss_fn():
            return model(x).sum()

        worst = finite_difference_check(loss_fn, model.named_parameters())
        assert worst < 1e-3, f"max relative error {worst:.3e}"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EcgEncoderConfig(conv_channels=(8,), conv_kernels=(3, 3), conv_strides=(2,))
        with pytest.raises(ValueError):
            EcgEncoderConfig(embed_dim=10, n_heads=3)
        with pytest.raises(ValueError):
            EcgEncoderConfig(embed_dim=8, n_heads=2, pos_conv_groups=3)


class TestTextEncoder:
    def _model(self, seed=0):
        torch.manual_seed(seed)
        return TextEncoder(tiny_text_config()).eval()

    def _tokens(self, n_real=5):
        ids = torch.zeros(2, 8, dtype=torch.long)
        ids[:, :n_real] = torch.arange(3, 3 + n_real)
        mask = torch.zeros(2, 8, dtype=torch.bool)
        mask[:, :n_real] = True
        return ids, mask

    def test_output_shape(self):
        model = self._model()
        ids, mask = self._tokens()
        with torch.no_grad():
            out = model(ids, mask)
        assert out.shape == (2, 8, 8)

    def test_shape_contract_768(self):
        torch.manual_seed(4)
        config = TextEncoderConfig(vocab_size=20, n_layers=1, max_len=16)
        model = TextEncoder(config).eval()
        ids = torch.zeros(3, 16, dtype=torch.long)
        mask = torch.zeros(3, 16, dtype=torch.bool)
        ids[:, 0] = 3
        mask[:, 0] = True
        with torch.no_grad():
            out = model(ids, mask)
        assert out.shape == (3, 16, 768)

    def test_pad_content_never_leaks(self):
        model = self._model(seed=5)
        ids, mask = self._tokens(n_real=5)
        altered = ids.clone()
        altered[:, 5:] = torch.tensor([7, 9, 4])   # permute PAD-tail content
        with torch.no_grad():
            base = model(ids, mask)
            perturbed = model(altered, mask)
        assert torch.allclose(base[:, :5], perturbed[:, :5], atol=1e-5)

    def test_attention_rows_over_valid_keys(self):
        model = self._model(seed=6)
        model.blocks[0].attn.store_attention = True
        ids, mask = self._tokens(n_real=5)
        with torch.no_grad():
            model(ids, mask)
        attn = model.blocks[0].attn.last_attention
        sums = attn.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        assert attn[..., 5:].abs().max() == 0.0   # masked keys get exactly zero

    def test_token_out_of_range(self):
        model = self._model()
        ids, mask = self._tokens()
        ids[0, 0] = 999
        with pytest.raises(ValueError, match="token out of range"):
            model(ids, mask)

    def test_gradient_check(self):
        torch.manual_seed(7)
        model = TextEncoder(tiny_text_config()).double()
        ids, mask = self._tokens(n_real=6)

        def loss_fn():
            return model(ids, mask).sum()

        worst = finite_difference_check(loss_fn, model.named_parameters())
        assert worst < 1e-3, f"max relative error {worst:.3e}"


class TestProjectionHeads:
    def test_identity_dense_on_constant_rows(self):
        head = EcgProjectionHead(4, 4)
        with torch.no_grad():
            head.dense.weight.copy_(torch.eye(4))
            head.dense.bias.zero_()
        row = torch.tensor([0.5, -1.0, 0.0, 2.0])
        states = row.expand(3, 4)[None]          # constant rows -> pool returns row
        out = head(states)
        expected = torch.tensor([math.tanh(v) for v in row.tolist()])
        assert torch.allclose(out[0], expected, atol=1e-6)
        assert (out.abs() < 1.0).all()           # Tanh range before identity dense

    def test_text_head_masked_mean(self):
        head = TextProjectionHead(4, 4)
        with torch.no_grad():
            head.dense.weight.copy_(torch.eye(4))
            head.dense.bias.zero_()
        states = torch.zeros(1, 3, 4)
        states[0, 0] = torch.tensor([1.0, 1.0, 1.0, 1.0])
        states[0, 1] = torch.tensor([3.0, 3.0, 3.0, 3.0])
        states[0, 2] = torch.tensor([99.0, 99.0, 99.0, 99.0])  # masked out
        mask = torch.tensor([[True, True, False]])
        out = head(states, mask)
        assert torch.allclose(out[0], torch.full((4,), math.tanh(2.0)), atol=1e-6)

    def test_empty_pooling_error(self):
        head = TextProjectionHead(4, 4)
        states = torch.zeros(1, 3, 4)
        mask = torch.zeros(1, 3, dtype=torch.bool)
        with pytest.raises(ValueError, match="empty pooling"):
            head(states, mask)

    def test_projection_dim(self):
        head = EcgProjectionHead(8, 768)
        out = head(torch.randn(2, 5, 8))
        assert out.shape == (2, 768)
