import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stroketriage.backbones import (
    ARCHS,
    TNT,
    BackboneConfig,
    ConfigError,
    ConvNeXtBlock,
    MultiHeadSelfAttention,
    PatchEmbed,
    SchemaMismatchError,
    ViT,
    build_backbone,
    convnext_block,
    grid_partition,
    grid_reverse,
    load_external_backbone,
    load_params,
    maxvit_block,
    MaxViTBlock,
    mhsa,
    patch_embed,
    replace_head,
    save_backbone,
    save_params,
    toy_config,
    tnt_forward,
    vit_forward,
    window_partition,
    window_reverse,
)
from stroketriage.backbones.common import patchify


def toy_model(arch, seed=0, **kw):
    return replace_head(build_backbone(toy_config(arch, **kw), seed=seed)).eval()


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(arch="resnet"),
        dict(image_side=60, patch_size=8),
        dict(embed_dim=64, heads=5),
        dict(depth=0),
        dict(arch="tnt", patch_size=8, inner_patch_size=3),
        dict(arch="convnext", patch_size=4, kernel_size=4),
        dict(arch="maxvit", patch_size=2, window_size=5),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            BackboneConfig(**kw)

    def test_round_trip(self):
        for arch in ARCHS:
            cfg = toy_config(arch)
            assert BackboneConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            BackboneConfig.from_dict({"arch": "vit", "bogus": 1})


class TestPatchEmbed:
    @pytest.mark.parametrize("side,patch,n", [(224, 16, 196), (32, 16, 4), (64, 8, 64)])
    def test_counts(self, side, patch, n):
        pe = PatchEmbed(side, patch, 3, 8)
        assert patch_embed(torch.zeros(3, side, side), patch, 8, pe).shape == (n, 8)

    def test_zero_image_gives_bias(self):
        torch.manual_seed(0)
        pe = PatchEmbed(32, 8, 3, 16)
        out = patch_embed(torch.zeros(3, 32, 32), 8, 16, pe)
        assert torch.allclose(out, pe.proj.bias.expand_as(out))

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            PatchEmbed(30, 8, 3, 8)
        with pytest.raises(ConfigError):
            patchify(torch.zeros(1, 3, 30, 30), 8)

    def test_patch_is_flattened_region(self):
        img = torch.arange(3 * 8 * 8, dtype=torch.float64).reshape(1, 3, 8, 8)
        p = patchify(img, 4)
        # second patch in row-major order is the top-right 4x4 block
        assert torch.equal(p[0, 1], img[0, :, 0:4, 4:8].reshape(-1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 6))
    def test_vit_token_count(self, grid, patch):
        side = grid * patch
        pe = PatchEmbed(side, patch, 3, 4)
        assert pe(torch.zeros(1, 3, side, side)).shape == (1, grid * grid, 4)


class TestAttention:
    def test_single_token(self):
        torch.manual_seed(0)
        m = MultiHeadSelfAttention(8, 2).double()
        m.keep_attention = True
        x = torch.randn(1, 8, dtype=torch.float64)
        out = mhsa(x, 2, m)
        assert torch.equal(m.last_attention, torch.ones(1, 2, 1, 1, dtype=torch.float64))
        v = m.qkv(x)[:, 16:]
        torch.testing.assert_close(out, m.proj(v))

    def test_heads_mismatch(self):
        with pytest.raises(ConfigError):
            mhsa(torch.zeros(4, 8), 4, MultiHeadSelfAttention(8, 2))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.sampled_from([(8, 1), (8, 2), (12, 3), (16, 4)]), st.integers(0, 10_000), st.floats(0.1, 30))
    def test_rows_sum_to_one(self, n, dh, seed, scale):
        d, h = dh
        torch.manual_seed(seed)
        m = MultiHeadSelfAttention(d, h)
        m.keep_attention = True
        mhsa(torch.randn(2, n, d) * scale, h, m)
        a = m.last_attention
        assert a.shape == (2, h, n, n)
        assert torch.all(a >= 0)
        assert torch.max(torch.abs(a.sum(-1) - 1)) <= 1e-6


class TestForward:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_logits_and_determinism(self, arch):
        m = toy_model(arch)
        x = torch.rand(2, 3, 64, 64)
        a, b = m(x), m(x)
        assert a.shape == (2, 3)
        assert torch.equal(a, b)

    def test_single_image_helpers(self):
        x = torch.rand(3, 64, 64)
        feats, logits = vit_forward(toy_model("vit"), x)
        assert feats.shape == (64,) and logits.shape == (3,)
        feats, logits = tnt_forward(toy_model("tnt"), x)
        assert logits.shape == (3,)
        with pytest.raises(ConfigError):
            vit_forward(toy_model("tnt"), x)

    def test_dropout_seeded(self):
        m = toy_model("vit", dropout=0.3).train()
        x = torch.rand(2, 3, 64, 64)
        torch.manual_seed(5)
        a = m(x)
        torch.manual_seed(5)
        assert torch.equal(a, m(x))

    def test_tnt_token_shapes(self):
        cfg = BackboneConfig(arch="tnt", image_side=224, patch_size=16, inner_patch_size=4, embed_dim=64, heads=4)
        assert (cfg.num_patches, cfg.words_per_patch) == (196, 16)
        m = TNT(toy_config("tnt"))
        assert m.token_shapes() == (64, 4)
        assert m.word_embed(torch.zeros(2, 3, 64, 64)).shape == (2 * 64, 4, 16)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.sampled_from([(4, 2), (4, 1), (8, 4), (8, 2), (6, 3)]))
    def test_tnt_word_counts(self, grid, pq):
        p, q = pq
        cfg = BackboneConfig(arch="tnt", image_side=grid * p, patch_size=p, inner_patch_size=q,
                             embed_dim=8, heads=2, inner_dim=4, inner_heads=2, depth=1)
        m = TNT(cfg)
        words = m.word_embed(torch.zeros(1, 3, grid * p, grid * p))
        assert words.shape == (grid * grid, (p // q) ** 2, 4)

    def test_registry_names_stable(self):
        assert list(toy_model("maxvit", seed=0).layer_registry) == list(toy_model("maxvit", seed=1).layer_registry)
        assert list(toy_model("maxvit").layer_registry)[0] == "stem.conv1"

    def test_every_parameter_in_graph(self):
        for arch in ARCHS:
            m = toy_model(arch)
            m(torch.rand(1, 3, 64, 64)).sum().backward()
            missing = [n for n, p in m.named_parameters() if p.grad is None]
            assert not missing, (arch, missing)

    def test_tnt_zero_projection_is_vit(self):
        cfg = toy_config("tnt")
        tnt = replace_head(build_backbone(cfg, seed=1)).double().eval()
        vit = replace_head(ViT(toy_config("vit", embed_dim=cfg.embed_dim, depth=cfg.depth, heads=cfg.heads))).double().eval()
        with torch.no_grad():
            for blk in tnt.blocks:
                blk.inner_to_outer.weight.zero_()
                blk.inner_to_outer.bias.zero_()
        src = tnt.state_dict()
        tied = {}
        for k in vit.state_dict():
            if k.startswith("blocks."):
                i, rest = k.split(".", 2)[1:]
                tied[k] = src[f"blocks.{i}.outer.{rest}"]
            else:
                tied[k] = src[k]
        vit.load_state_dict(tied)
        x = torch.rand(4, 3, 64, 64, dtype=torch.float64)
        assert torch.max(torch.abs(tnt(x) - vit(x))) <= 1e-6


class TestConvNeXt:
    def test_identity_residual(self):
        blk = ConvNeXtBlock(8, 7)
        with torch.no_grad():
            blk.dwconv.weight.zero_()
            blk.dwconv.weight[:, 0, 3, 3] = 1.0
            blk.pwconv2.weight.zero_()
            blk.pwconv2.bias.zero_()
        x = torch.randn(8, 9, 11)
        out = convnext_block(x, blk, 7)
        assert out.shape == x.shape
        assert torch.equal(out, x)

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_same_padding(self, k):
        x = torch.randn(2, 4, 10, 6)
        assert convnext_block(x, ConvNeXtBlock(4, k), k).shape == x.shape

    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            ConvNeXtBlock(4, 6)
        with pytest.raises(ConfigError):
            convnext_block(torch.zeros(4, 8, 8), ConvNeXtBlock(4, 7), 6)


class TestMaxViTPartitions:
    def test_56_by_7(self):
        x = torch.randn(1, 56, 56, 8)
        assert window_partition(x, 7).shape == (64, 49, 8)
        assert grid_partition(x, 7).shape == (49, 64, 8)

    def test_window_contents(self):
        idx = torch.arange(8 * 8).reshape(1, 8, 8, 1)
        w = window_partition(idx, 4)
        assert w[1, :, 0].tolist() == [r * 8 + c for r in range(4) for c in range(4, 8)]
        g = grid_partition(idx, 4)
        # first grid group: one token per window, stride 4 apart
        assert g[0, :, 0].tolist() == [0, 4, 32, 36]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.integers(1, 3))
    def test_bijective(self, gh, gw, p, b):
        h, w = gh * p, gw * p
        idx = torch.arange(b * h * w, dtype=torch.int64).reshape(b, h, w, 1)
        for part, rev, groups, size in (
            (window_partition, window_reverse, gh * gw, p * p),
            (grid_partition, grid_reverse, p * p, gh * gw),
        ):
            t = part(idx, p)
            assert t.shape == (b * groups, size, 1)
            assert sorted(t.flatten().tolist()) == list(range(b * h * w))
            assert torch.equal(rev(t, p, h, w), idx)

    def test_indivisible(self):
        with pytest.raises(ConfigError):
            window_partition(torch.zeros(1, 10, 10, 2), 4)
        with pytest.raises(ConfigError):
            maxvit_block(torch.zeros(8, 10, 10), 4, MaxViTBlock(8, 2, 4))

    def test_block_shape(self):
        blk = MaxViTBlock(8, 2, 4)
        assert maxvit_block(torch.randn(8, 8, 12), 4, blk).shape == (8, 8, 12)


class TestArchive:
    def test_byte_identical_resave(self, tmp_path):
        m = toy_model("vit")
        save_backbone(m, tmp_path / "a.safetensors")
        back = load_external_backbone("vit", tmp_path / "a.safetensors")
        save_backbone(back, tmp_path / "b.safetensors")
        assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()

    @pytest.mark.parametrize("arch", ARCHS)
    def test_logits_preserved(self, tmp_path, arch):
        m = toy_model(arch, seed=3)
        save_backbone(m, tmp_path / "w.safetensors")
        back = load_external_backbone(arch, tmp_path / "w.safetensors").eval()
        x = torch.rand(10, 3, 64, 64)
        assert torch.max(torch.abs(m(x) - back(x))) <= 1e-6

    def test_missing_parameter_named(self, tmp_path):
        m = toy_model("vit")
        save_backbone(m, tmp_path / "w.safetensors")
        tensors, meta = load_params(tmp_path / "w.safetensors")
        del tensors["blocks.1.attn.qkv.weight"]
        save_params(tmp_path / "broken.safetensors", tensors, meta)
        with pytest.raises(SchemaMismatchError, match="blocks.1.attn.qkv.weight"):
            load_external_backbone("vit", tmp_path / "broken.safetensors")

    def test_wrong_arch(self, tmp_path):
        save_backbone(toy_model("vit"), tmp_path / "w.safetensors")
        with pytest.raises(SchemaMismatchError):
            load_external_backbone("tnt", tmp_path / "w.safetensors")

    def test_registry_map(self, tmp_path):
        save_backbone(toy_model("maxvit"), tmp_path / "w.safetensors")
        m = load_external_backbone(
            "maxvit", tmp_path / "w.safetensors", {"stages.3.blocks.0": "stages.3.blocks.1.conv.conv2_kxk"}
        )
        assert "stages.3.blocks.1.conv.conv2_kxk" in m.layer_registry
        with pytest.raises(KeyError):
            m.rename_layers({"nope": "x"})


def test_softmax_argmax_shift_invariant():
    logits = toy_model("vit")(torch.rand(4, 3, 64, 64))
    assert torch.equal(logits.argmax(1), (logits + 7.5).argmax(1))
