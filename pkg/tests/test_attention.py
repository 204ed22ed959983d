import numpy as np
import pytest
import torch

from fewseg.attention import (ScaleAttention, SupportRelationAttention,
                              class_prototype, combine_scales)
from fewseg.errors import ConfigError

from oracles import (bilinear_resize_oracle, combine_scales_oracle,
                     modulate_oracle, relation_weights_oracle)


def relation(channels=16, groups=4, seed=0):
    torch.manual_seed(seed)
    return SupportRelationAttention(channels, groups).double()


class TestRelationWeights:
    def test_single_shot_gives_unit_weight(self):
        rel = relation()
        w = rel.relation_weights(torch.rand(1, 16, dtype=torch.float64), 0).detach()
        assert w.shape == (1, 1)
        assert float(w[0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_identical_inputs_give_uniform_rows(self):
        rel = relation()
        feats = torch.rand(1, 16, dtype=torch.float64).repeat(4, 1)
        w = rel.relation_weights(feats, 2)
        assert torch.allclose(w, torch.full((4, 4), 0.25, dtype=torch.float64), atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        rel = relation()
        for _ in range(25):
            feats = torch.from_numpy(rng.standard_normal((3, 16)))
            for g in range(4):
                got = rel.relation_weights(feats, g).detach().numpy()
                want = relation_weights_oracle(feats.numpy(),
                                               rel.w_a[g].detach().numpy(),
                                               rel.w_b[g].detach().numpy())
                assert np.abs(got - want).max() < 1e-6

    def test_rows_stochastic_for_various_shot_counts(self):
        rng = np.random.default_rng(1)
        for k in (2, 3, 5):
            rel = relation(seed=k)
            for _ in range(50):
                feats = torch.from_numpy(rng.standard_normal((k, 16)) * 3)
                for g in range(4):
                    w = rel.relation_weights(feats, g)
                    assert torch.allclose(w.sum(-1), torch.ones(k, dtype=torch.float64),
                                          atol=1e-6)
                    assert (w > 0).all() and (w <= 1.0 + 1e-12).all()

    def test_group_count_must_divide_channels(self):
        with pytest.raises(ConfigError):
            SupportRelationAttention(10, 4)


class TestModulation:
    def test_zero_value_matrix_is_identity(self):
        rel = relation()
        with torch.no_grad():
            rel.w_v.zero_()
        feats = torch.rand(3, 16, dtype=torch.float64)
        assert torch.equal(rel.modulate(feats), feats)

    def test_identical_inputs_stay_identical(self):
        rel = relation()
        feats = torch.rand(1, 16, dtype=torch.float64).repeat(2, 1)
        out = rel.modulate(feats)
        assert torch.allclose(out[0], out[1], atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        rel = relation()
        for _ in range(10):
            feats = torch.from_numpy(rng.standard_normal((5, 16)))
            got = rel.modulate(feats).detach().numpy()
            want = modulate_oracle(feats.numpy(), rel.w_a.detach().numpy(),
                                   rel.w_b.detach().numpy(), rel.w_v.detach().numpy())
            assert np.abs(got - want).max() < 1e-6

    def test_permutation_equivariance(self):
        rel = relation()
        feats = torch.rand(5, 16, dtype=torch.float64)
        perm = torch.tensor([3, 0, 4, 1, 2])
        direct = rel.modulate(feats)[perm]
        permuted = rel.modulate(feats[perm])
        assert torch.allclose(direct, permuted, atol=1e-10)


class TestClassPrototype:
    def test_single_shot_bypasses_attention(self):
        rel = relation()
        feats = torch.rand(1, 16, dtype=torch.float64)
        with_attn = class_prototype(feats, rel, use_support_attention=True)
        without = class_prototype(feats, rel, use_support_attention=False)
        assert torch.equal(with_attn, feats[0])
        assert torch.equal(without, feats[0])

    def test_disabled_attention_is_plain_average(self):
        feats = torch.rand(5, 16, dtype=torch.float64)
        proto = class_prototype(feats, relation(), use_support_attention=False)
        assert torch.allclose(proto, feats.mean(0), atol=1e-12)

    def test_composition_matches_oracle(self):
        rng = np.random.default_rng(5)
        rel = relation()
        feats = torch.from_numpy(rng.standard_normal((5, 16)))
        got = class_prototype(feats, rel, use_support_attention=True).detach().numpy()
        want = modulate_oracle(feats.numpy(), rel.w_a.detach().numpy(),
                               rel.w_b.detach().numpy(),
                               rel.w_v.detach().numpy()).mean(axis=0)
        assert np.abs(got - want).max() < 1e-6

    def test_zero_value_matrix_equalizes_both_paths(self):
        rel = relation()
        with torch.no_grad():
            rel.w_v.zero_()
        feats = torch.rand(4, 16, dtype=torch.float64)
        on = class_prototype(feats, rel, use_support_attention=True)
        off = class_prototype(feats, rel, use_support_attention=False)
        assert torch.allclose(on, off, atol=1e-12)


class TestScaleAttention:
    def test_zero_parameters_give_zero_attention_map(self):
        torch.manual_seed(0)
        attn = ScaleAttention(8)
        with torch.no_grad():
            for p in attn.attn.parameters():
                p.zero_()
        a, _ = attn(torch.rand(8, 6, 6))
        assert torch.count_nonzero(a) == 0

    def test_deterministic(self):
        torch.manual_seed(0)
        attn = ScaleAttention(8)
        x = torch.rand(8, 5, 7)
        a1, t1 = attn(x)
        a2, t2 = attn(x)
        assert torch.equal(a1, a2) and torch.equal(t1, t2)

    def test_output_shapes(self):
        torch.manual_seed(0)
        attn = ScaleAttention(12)
        rng = np.random.default_rng(0)
        for _ in range(5):
            h, w = int(rng.integers(2, 20)), int(rng.integers(2, 20))
            a, t = attn(torch.rand(12, h, w))
            assert a.shape == (1, h, w)
            assert t.shape == (12, h, w)


class TestCombineScales:
    def test_single_scale_passes_transform_through(self):
        a = torch.rand(1, 6, 6, dtype=torch.float64)
        t = torch.rand(9, 6, 6, dtype=torch.float64)
        out = combine_scales([(a, t)])
        assert torch.allclose(out, t, atol=1e-12)

    def test_equal_attention_maps_average_the_transforms(self):
        a = torch.rand(1, 6, 6, dtype=torch.float64)
        t1 = torch.rand(4, 6, 6, dtype=torch.float64)
        t2 = torch.rand(4, 6, 6, dtype=torch.float64)
        out = combine_scales([(a, t1), (a, t2)])
        assert torch.allclose(out, (t1 + t2) / 2, atol=1e-12)

    def test_matches_per_pixel_oracle_same_resolution(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            branches = [(torch.from_numpy(rng.standard_normal((1, 6, 7))),
                         torch.from_numpy(rng.standard_normal((5, 6, 7))))
                        for _ in range(4)]
            got = combine_scales(branches).numpy()
            want = combine_scales_oracle([b[0].numpy() for b in branches],
                                         [b[1].numpy() for b in branches], 6, 7)
            assert np.abs(got - want).max() < 1e-6

    def test_matches_oracle_across_mixed_resolutions(self):
        rng = np.random.default_rng(17)
        sizes = [(8, 8), (4, 4), (2, 2)]
        branches = [(torch.from_numpy(rng.standard_normal((1, h, w))),
                     torch.from_numpy(rng.standard_normal((3, h, w))))
                    for h, w in sizes]
        got = combine_scales(branches).numpy()
        want = combine_scales_oracle([b[0].numpy() for b in branches],
                                     [b[1].numpy() for b in branches], 8, 8)
        assert np.abs(got - want).max() < 1e-6

    def test_per_pixel_weights_form_simplex(self):
        rng = np.random.default_rng(3)
        attn = [torch.from_numpy(rng.standard_normal((1, s, s)) * 5)
                for s in (8, 4, 2)]
        ups = torch.stack([
            torch.from_numpy(bilinear_resize_oracle(a.numpy(), 8, 8)) for a in attn
        ])
        weights = torch.softmax(ups, dim=0)
        sums = weights.sum(dim=0)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert (weights > 0).all()

    def test_constant_shift_of_attention_logits_is_invariant(self):
        rng = np.random.default_rng(9)
        branches = [(torch.from_numpy(rng.standard_normal((1, s, s))),
                     torch.from_numpy(rng.standard_normal((4, s, s))))
                    for s in (6, 3)]
        base = combine_scales(branches)
        shifted = combine_scales([(a + 11.5, t) for a, t in branches])
        assert torch.allclose(base, shifted, atol=1e-5)

    def test_empty_branch_list_rejected(self):
        with pytest.raises(ConfigError):
            combine_scales([])
