import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cooc import rf, nn
from cooc.rf import ArchConfig, LayerDescriptor


class TestProfile:
    def test_single_conv(self):
        assert rf.receptive_field_profile([LayerDescriptor("conv", 7, 2)]) == [7]

    def test_empty_chain(self):
        assert rf.receptive_field_profile([]) == []

    def test_resnet50_reference_final_rf(self):
        # the formula gives 427 for the torchvision-style stride placement;
        # close to the ~425 usually quoted for ResNet50
        cfg = ArchConfig(base="resnet50_reference")
        assert abs(rf.final_rf(cfg) - 425) <= 5

    def test_monotone(self):
        chain = rf.descriptor_chain(ArchConfig(base="rf_resnet50"))
        profile = rf.receptive_field_profile(chain)
        assert all(b >= a for a, b in zip(profile, profile[1:]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_one_by_one_insertion_invariance(self, seed):
        rng = np.random.default_rng(seed)
        chain = [
            LayerDescriptor("conv", int(rng.integers(1, 8)), int(rng.integers(1, 3)))
            for _ in range(int(rng.integers(1, 7)))
        ]
        base_final = rf.receptive_field_profile(chain)[-1]
        pos = int(rng.integers(0, len(chain) + 1))
        inserted = chain[:pos] + [LayerDescriptor("conv", 1, 1)] + chain[pos:]
        assert rf.receptive_field_profile(inserted)[-1] == base_final


class TestSolve:
    def test_rf99(self):
        cfg = rf.solve_rf_config("rf_resnet50", 99)
        assert rf.final_rf(cfg) == 99
        assert cfg.m is False and cfg.strides == (2, 2, 2)

    def test_rf29_small_image(self):
        cfg = rf.solve_rf_config("rf_resnet18", 29, small_image_stem=True)
        assert rf.final_rf(cfg) == 29

    def test_unreachable_lists_achievable(self):
        with pytest.raises(ValueError, match="achievable"):
            rf.solve_rf_config("rf_resnet50", 2)

    def test_tie_break_prefers_early_strides(self):
        cfg = rf.solve_rf_config("rf_resnet18", 29, small_image_stem=True)
        assert cfg.strides[0] >= cfg.strides[1] >= cfg.strides[2]


class TestParams:
    def test_single_linear(self):
        layer = nn.Linear(10, 5, bias=True)
        assert rf.count_params(layer) == 55

    @pytest.mark.parametrize(
        "label,cfg,quoted",
        [
            ("resnet50", ArchConfig(base="resnet50_reference"), 23.5e6),
            ("resnet18", ArchConfig(base="resnet18_reference"), 11e6),
            ("rf_resnet50", ArchConfig(base="rf_resnet50"), 23.7e6),
            ("rf_resnet50v0", ArchConfig(base="rf_resnet50", post_pool_mlp=False), 21.4e6),
            ("rf_resnet18", ArchConfig(base="rf_resnet18"), 8e6),
        ],
    )
    def test_published_counts(self, label, cfg, quoted):
        count = rf.count_params(rf.build_backbone(cfg))
        assert abs(count - quoted) / quoted < 0.02

    def test_rf_variants_close_to_reference(self):
        ref50 = rf.count_params(rf.build_backbone(ArchConfig(base="resnet50_reference")))
        rf50 = rf.count_params(rf.build_backbone(ArchConfig(base="rf_resnet50")))
        assert abs(rf50 - ref50) / ref50 < 0.05


def tiny_cfg(**kw):
    kw.setdefault("width", 0.125)
    return ArchConfig(**kw)


class TestBackbone:
    def test_pooled_is_spatial_mean(self):
        cfg = tiny_cfg(base="rf_resnet18", small_image_stem=True, strides=(2, 1, 1))
        bb = rf.build_backbone(cfg, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
        out = bb(rf.T.Tensor(x), mode="train")
        np.testing.assert_allclose(
            out.global_pooled.data, out.local.data.mean(axis=(2, 3)), atol=1e-6
        )

    def test_global_equals_pooled_without_mlp(self):
        cfg = tiny_cfg(base="rf_resnet18", small_image_stem=True, strides=(2, 1, 1), post_pool_mlp=False)
        bb = rf.build_backbone(cfg, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
        out = bb(rf.T.Tensor(x), mode="train")
        np.testing.assert_array_equal(out.global_.data, out.global_pooled.data)

    def test_grid_side(self):
        cfg = rf.solve_rf_config("rf_resnet50", 99, width=0.125)
        bb = rf.build_backbone(cfg)
        assert bb.grid_side(224) == 14

    def test_config_roundtrip(self):
        cfg = ArchConfig(base="rf_resnet18", m=False, strides=(2, 1, 1), width=0.5, small_image_stem=True)
        flat = cfg.to_flat_dict()
        again = ArchConfig.from_flat_dict({k: str(v) for k, v in flat.items()})
        assert again == cfg


class _SingleConvNet(nn.Module):
    def __init__(self):
        self.conv = nn.Conv2d(3, 4, 3, stride=1, bias=False, rng=np.random.default_rng(0))

    def forward(self, x, mode="train", linearize=False):
        y = self.conv(x)
        return rf.BackboneOutput(local=y, global_pooled=rf.T.global_avg_pool(y), global_=rf.T.global_avg_pool(y))


class TestEmpiricalRf:
    def test_single_conv_footprint(self):
        assert rf.empirical_rf(_SingleConvNet(), 9) == 3

    def test_corner_probe_clipped(self):
        net = _SingleConvNet()
        assert rf.empirical_rf(net, 9, probe_position=(0, 0)) <= rf.empirical_rf(net, 9)

    def test_probe_outside_grid(self):
        with pytest.raises(ValueError, match="outside"):
            rf.empirical_rf(_SingleConvNet(), 9, probe_position=(99, 0))

    @pytest.mark.parametrize(
        "cfg,image",
        [
            (tiny_cfg(base="rf_resnet18", small_image_stem=True, strides=(2, 1, 1)), 64),
            (tiny_cfg(base="rf_resnet18", small_image_stem=True, strides=(1, 1, 1)), 48),
            (tiny_cfg(base="rf_resnet50", m=False, strides=(2, 2, 1)), 128),
        ],
    )
    def test_theory_matches_saliency(self, cfg, image):
        bb = rf.build_backbone(cfg, rng=np.random.default_rng(3))
        assert rf.empirical_rf(bb, image) == rf.final_rf(cfg)
