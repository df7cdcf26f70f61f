import numpy as np
import pytest

from piseg.errors import ConfigError
from piseg.stems import (
    StemConfig,
    aux_head_forward,
    conv_stem_forward,
    deconv_stem_forward,
    init_conv_stem,
    init_deconv_stem,
)
from piseg.tensor import Tensor, no_grad


def tensors(d, dtype=np.float32):
    return {k: Tensor(v.astype(dtype)) for k, v in d.items()}


@pytest.mark.parametrize("p,conv,deconv", [(4, 2, 0), (8, 3, 1)])
def test_block_counts_from_parameter_lists(p, conv, deconv):
    cfg = StemConfig(p, 1, 96, 3)
    assert (cfg.conv_blocks, cfg.deconv_blocks) == (conv, deconv)
    params = init_conv_stem(np.random.default_rng(0), cfg)
    assert len({k.split(".")[0] for k in params}) == conv
    dparams = init_deconv_stem(np.random.default_rng(0), 96, 3, cfg.deconv_blocks)
    assert len({k.split(".")[0] for k in dparams if k.startswith("block")}) == deconv


def test_channel_ladder_p8_doubles_to_embed_dim():
    cfg = StemConfig(8, 3, 96, 2)
    ladder = cfg.channel_ladder()
    assert ladder == [24, 48, 96]
    params = init_conv_stem(np.random.default_rng(0), cfg)
    # block k maps ladder[k-2] (or the image channels) to ladder[k-1]
    assert params["block1.conv1.weight"].shape[:2] == (24, 3)
    assert params["block2.conv1.weight"].shape[:2] == (48, 24)
    assert params["block3.conv1.weight"].shape[:2] == (96, 48)
    assert all(b / a == 2 for a, b in zip(ladder, ladder[1:]))


def test_patch_size_must_be_4_or_8():
    with pytest.raises(ConfigError):
        StemConfig(2, 1, 96, 3)


@pytest.mark.parametrize("p,size,cin", [(4, 224, 1), (8, 512, 3)])
def test_conv_stem_reduces_by_patch_size(p, size, cin):
    cfg = StemConfig(p, cin, 96, 3)
    params = tensors(init_conv_stem(np.random.default_rng(0), cfg))
    with no_grad():
        out = conv_stem_forward(Tensor(np.zeros((1, cin, size, size), np.float32)), params, cfg)
    assert out.shape == (1, 96, size // p, size // p)


def test_conv_stem_rejects_indivisible_input():
    cfg = StemConfig(4, 1, 16, 3)
    params = tensors(init_conv_stem(np.random.default_rng(0), cfg))
    with pytest.raises(ConfigError):
        conv_stem_forward(Tensor(np.zeros((1, 1, 30, 30), np.float32)), params, cfg)


@pytest.mark.parametrize("p,feat,full", [(4, 56, 224), (8, 64, 512)])
def test_deconv_stem_restores_full_resolution(p, feat, full):
    cfg = StemConfig(p, 1, 96, 5)
    params = tensors(init_deconv_stem(np.random.default_rng(0), 96, 5, cfg.deconv_blocks))
    with no_grad():
        out = deconv_stem_forward(Tensor(np.zeros((1, 96, feat, feat), np.float32)), params, cfg.deconv_blocks)
    assert out.shape == (1, 5, full, full)


def test_deconv_stem_p8_goes_through_double_resolution():
    params = tensors(init_deconv_stem(np.random.default_rng(0), 96, 2, 1))
    assert params["block1.deconv.weight"].shape == (96, 48, 2, 2)
    assert params["out.weight"].shape == (48, 2, 4, 4)


@pytest.mark.parametrize("p,k", [(4, 2), (4, 4), (8, 4)])
def test_stems_round_trip_resolution(p, k):
    cfg = StemConfig(p, 1, 32, 3)
    size = p * k
    enc = tensors(init_conv_stem(np.random.default_rng(0), cfg))
    dec = tensors(init_deconv_stem(np.random.default_rng(1), 32, 3, cfg.deconv_blocks))
    with no_grad():
        feat = conv_stem_forward(Tensor(np.zeros((2, 1, size, size), np.float32)), enc, cfg)
        out = deconv_stem_forward(feat, dec, cfg.deconv_blocks)
    assert feat.shape[2] * p == size and out.shape == (2, 3, size, size)


def test_aux_head_upsamples_stage_by_four_for_p4():
    params = tensors(init_deconv_stem(np.random.default_rng(0), 64, 3, 0))
    with no_grad():
        out = aux_head_forward(Tensor(np.zeros((1, 64, 7, 7), np.float32)), params, 0)
    assert out.shape == (1, 3, 28, 28)
