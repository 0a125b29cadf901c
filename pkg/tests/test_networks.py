import numpy as np
import pytest

from lcgan.diffcomp import Tensor, no_grad
from lcgan.networks import (ArchitectureError, DiscriminatorConfig, GeneratorResNetConfig, SegmentorConfig,
                            build_discriminator, build_generator_F, build_generator_G, build_segmentor,
                            discriminator_output_size, param_checksum, probe_receptive_field,
                            receptive_field, resnet_generator_param_count)


def _img(n=1, size=32, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, (n, 3, size, size)).astype(np.float32))


def test_receptive_field_full_scale_is_70():
    assert receptive_field(DiscriminatorConfig.full_scale()) == 70


def test_receptive_field_desk_is_34():
    assert receptive_field(DiscriminatorConfig()) == 34


def test_probe_agrees_on_desk_config():
    cfg = DiscriminatorConfig()
    assert probe_receptive_field(cfg) == receptive_field(cfg)


def test_probe_agrees_on_full_scale_strides():
    # the probe only depends on kernel/stride layout; narrow widths keep it cheap
    cfg = DiscriminatorConfig(widths=(2, 2, 2, 2), strides=(2, 2, 2, 1, 1))
    assert probe_receptive_field(cfg) == 70


def test_full_scale_patch_map_size():
    assert discriminator_output_size(DiscriminatorConfig.full_scale(), 256) == 30


def test_discriminator_output_shape_matches_formula():
    cfg = DiscriminatorConfig()
    with no_grad():
        out = build_discriminator(cfg)(_img(2, 64))
    n = discriminator_output_size(cfg, 64)
    assert out.shape == (2, 1, n, n)


def test_discriminator_config_validates_strides():
    with pytest.raises(ArchitectureError):
        DiscriminatorConfig(widths=(8, 8), strides=(2,))


@pytest.mark.parametrize("cfg", [GeneratorResNetConfig(), GeneratorResNetConfig(base_width=8, n_residual_blocks=1),
                                 GeneratorResNetConfig.full_scale()])
def test_resnet_param_count_closed_form(cfg):
    assert build_generator_F(cfg).num_parameters() == resnet_generator_param_count(cfg)


def test_generator_F_shape_and_range():
    with no_grad():
        out = build_generator_F()(_img(2, 32))
    assert out.shape == (2, 3, 32, 32)
    assert np.all(np.abs(out.data) <= 1.0)


def test_generator_F_rejects_indivisible_size():
    with pytest.raises(ArchitectureError):
        build_generator_F()(_img(1, 30))


def test_segmentor_logits_shape():
    with no_grad():
        out = build_segmentor().eval()(_img(2, 32))
    assert out.shape == (2, 2, 32, 32)


def test_segmentor_full_scale_geometry():
    cfg = SegmentorConfig.full_scale_geometry(width_scale=1 / 16)
    assert cfg.output_stride == 16 and cfg.low_level_stride == 4
    seg = build_segmentor(cfg).eval()
    with no_grad():
        low, deep = seg.encoder(_img(1, 208))
        logits = seg(_img(1, 208))
    assert deep.shape[2:] == (13, 13)
    assert low.shape[2:] == (52, 52)
    assert logits.shape == (1, 2, 208, 208)


def test_segmentor_rejects_indivisible_size():
    with pytest.raises(ArchitectureError):
        build_segmentor()(_img(1, 36))


def test_generator_G_requires_segmentor():
    with pytest.raises(ArchitectureError):
        build_generator_G(None, None)


def test_generator_G_backbone_frozen_decoder_trainable():
    seg = build_segmentor(seed=1).eval()
    G = build_generator_G(None, seg, seed=2)
    out = G(_img(1, 32))
    assert out.shape == (1, 3, 32, 32)
    assert np.all(np.abs(out.data) <= 1.0)
    out.mean().backward()
    assert all(p.grad is None and not p.requires_grad for p in G.backbone.parameters())
    decoder = [p for n, p in G.named_parameters() if not n.startswith("backbone")]
    assert decoder and all(p.grad is not None for p in decoder)
    assert G.num_parameters(trainable_only=True) == sum(p.data.size for p in decoder)


def test_generator_G_backbone_is_a_copy():
    seg = build_segmentor(seed=1).eval()
    G = build_generator_G(None, seg, seed=2)
    before = param_checksum(seg)
    for p in G.backbone.parameters():
        p.data = p.data + 1.0
    assert param_checksum(seg) == before


def test_generator_G_backbone_stays_in_eval_mode():
    G = build_generator_G(None, build_segmentor(seed=1).eval(), seed=2)
    G.train()
    assert not G.backbone.training
    with no_grad():
        G(_img(2, 32))
    G2 = build_generator_G(None, build_segmentor(seed=1).eval(), seed=2)
    assert param_checksum(G.backbone) == param_checksum(G2.backbone)


def test_frozen_segmentor_passes_gradient_to_input_only():
    seg = build_segmentor(seed=0).eval().freeze()
    x = _img(1, 32)
    x.requires_grad = True
    seg(x).sum().backward()
    assert x.grad is not None and np.any(x.grad != 0)
    assert all(p.grad is None for p in seg.parameters())
    assert seg.num_parameters(trainable_only=True) == 0


def test_construction_is_seeded():
    assert param_checksum(build_generator_F(seed=4)) == param_checksum(build_generator_F(seed=4))
    assert param_checksum(build_generator_F(seed=4)) != param_checksum(build_generator_F(seed=5))
