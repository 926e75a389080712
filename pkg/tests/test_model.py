"""Block-level behavior of the network: reference fusion, attention
blocks, grammar, parameter accounting, checkpoint format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cotmisr import model as M
from cotmisr import tensor as T
from cotmisr.errors import ConfigError, DataError
from cotmisr.tensor import Tensor


def toy_config(**overrides):
    defaults = dict(
        k=2,
        c_in=1,
        c_e=8,
        r=3,
        arch="(1c1t)x1",
        lrca=M.LrcaConfig(ca_reduction=8),
        tblock=M.TBlockConfig(layers=1, heads=2, ff_dim=16),
    )
    defaults.update(overrides)
    return M.CotConfig(**defaults).validate()


class TestMedianReference:
    def test_odd_count_median(self):
        frames = np.zeros((1, 3, 1, 2, 2))
        frames[0, :, 0, 0, 0] = [5.0, 1.0, 3.0]
        out = M.median_reference(Tensor(frames))
        assert out.data[0, 0, 0, 0] == 3.0

    def test_single_frame_identity(self, rng):
        frames = rng.random((2, 1, 1, 4, 4))
        out = M.median_reference(Tensor(frames))
        np.testing.assert_array_equal(out.data, frames[:, 0])

    def test_even_count_matches_sort_oracle(self, rng):
        for _ in range(10):
            frames = rng.random((1, 4, 1, 5, 5))
            out = M.median_reference(Tensor(frames)).data
            srt = np.sort(frames, axis=1)
            expect = 0.5 * (srt[:, 1] + srt[:, 2])
            np.testing.assert_array_equal(out, expect)
        single = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1, 1)
        assert M.median_reference(Tensor(single)).data.ravel()[0] == 2.5

    def test_permutation_invariance(self, rng):
        frames = rng.random((1, 5, 1, 6, 6))
        ref = M.median_reference(Tensor(frames)).data
        for _ in range(20):
            perm = rng.permutation(5)
            ref_p = M.median_reference(Tensor(frames[:, perm])).data
            np.testing.assert_array_equal(ref_p, ref)


class TestPairWithReference:
    def test_reference_channels_first(self, rng):
        frames = rng.random((1, 3, 1, 4, 4))
        ref = M.median_reference(Tensor(frames))
        out = M.pair_with_reference(Tensor(frames), ref).data
        assert out.shape == (1, 3, 2, 4, 4)
        for i in range(3):
            np.testing.assert_array_equal(out[0, i, 0], ref.data[0, 0])
            np.testing.assert_array_equal(out[0, i, 1], frames[0, i, 0])

    def test_channel_doubling_shape_law(self, rng):
        frames = rng.random((2, 4, 3, 5, 5))
        ref = M.median_reference(Tensor(frames))
        out = M.pair_with_reference(Tensor(frames), ref)
        assert out.shape == (2, 4, 6, 5, 5)

    def test_frame_permutation_permutes_pairs(self, rng):
        frames = rng.random((1, 4, 1, 4, 4))
        ref = M.median_reference(Tensor(frames))
        base = M.pair_with_reference(Tensor(frames), ref).data
        perm = rng.permutation(4)
        ref_p = M.median_reference(Tensor(frames[:, perm]))
        permuted = M.pair_with_reference(Tensor(frames[:, perm]), ref_p).data
        np.testing.assert_array_equal(permuted, base[:, perm])

    def test_shape_mismatch_rejected(self, rng):
        frames = Tensor(rng.random((1, 2, 1, 4, 4)))
        with pytest.raises(ValueError, match="reference"):
            M.pair_with_reference(frames, Tensor(rng.random((1, 1, 3, 3))))


class TestShallowEncode:
    def test_output_shape(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        g = Tensor(rng.random((3, 2, 2, 6, 7)))
        out = M.shallow_encode(g, params, cfg)
        assert out.shape == (3, cfg.c_e, 6, 7)

    def test_zero_weights_give_constant_bias_map(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        for name in ("shallow.conv1.weight", "shallow.conv2.weight"):
            params[name].data[:] = 0.0
        params["shallow.conv1.bias"].data[:] = 0.0
        params["shallow.conv2.bias"].data[:] = 0.75
        g = Tensor(rng.random((1, 2, 2, 5, 5)))
        out = M.shallow_encode(g, params, cfg).data
        assert (out == 0.75).all()

    def test_wrong_frame_count_rejected(self, rng):
        cfg = toy_config(k=2)
        params = M.init_params(cfg, dtype=np.float64)
        g = Tensor(rng.random((1, 3, 2, 5, 5)))
        with pytest.raises(ConfigError, match="k=2"):
            M.shallow_encode(g, params, cfg)

    def test_translation_equivariance_on_interior(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, seed=3, dtype=np.float64)
        z = rng.random((1, 2, 2, 12, 12))
        g1 = Tensor(z[..., : 12 - 1, : 12 - 1])
        g2 = Tensor(z[..., 1:, 1:])  # same content shifted by one pixel
        out1 = M.shallow_encode(g1, params, cfg).data
        out2 = M.shallow_encode(g2, params, cfg).data
        # two 3x3 convs have receptive radius 2; compare windows clear of it
        np.testing.assert_allclose(out1[..., 3:-2, 3:-2], out2[..., 2:-3, 2:-3], atol=1e-12, rtol=0)


class TestLrca:
    def test_zeroed_depthwise_gives_residual_identity(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        params["cot.0.sa.depthwise.weight"].data[:] = 0.0
        params["cot.0.sa.depthwise.bias"].data[:] = 0.0
        x = rng.random((2, cfg.c_e, 5, 5))
        out = M.lrca_forward(Tensor(x), params, cfg, index=0).data
        np.testing.assert_array_equal(out, x)

    def test_half_gates_compose_as_quarter_branch(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        # zero both gate-producing convs so each sigmoid outputs exactly 0.5
        for name in ("cot.0.sa.pointwise.weight", "cot.0.sa.pointwise.bias",
                     "cot.0.ca.up.weight", "cot.0.ca.up.bias"):
            params[name].data[:] = 0.0
        x = rng.random((1, cfg.c_e, 6, 6))
        branch = T.depthwise_conv2d(
            Tensor(x),
            params["cot.0.sa.depthwise.weight"],
            params["cot.0.sa.depthwise.bias"],
            padding=1,
        ).data
        out = M.lrca_forward(Tensor(x), params, cfg, index=0).data
        np.testing.assert_array_equal(out, 0.25 * branch + x)

    def test_sa_disabled_is_pure_channel_attention(self, rng):
        cfg = toy_config(lrca=M.LrcaConfig(use_sa=False, ca_reduction=8))
        params = M.init_params(cfg, dtype=np.float64)
        x = rng.random((1, cfg.c_e, 4, 4))
        out = M.lrca_forward(Tensor(x), params, cfg, index=0).data

        xt = Tensor(x)
        s = T.global_avg_pool2d(xt)
        s = T.relu(T.conv2d(s, params["cot.0.ca.down.weight"], params["cot.0.ca.down.bias"]))
        s = T.sigmoid(T.conv2d(s, params["cot.0.ca.up.weight"], params["cot.0.ca.up.bias"]))
        expect = (xt * s + xt).data
        np.testing.assert_array_equal(out, expect)

    def test_both_disabled_rejected(self):
        with pytest.raises(ConfigError, match="use_ca/use_sa"):
            toy_config(lrca=M.LrcaConfig(use_ca=False, use_sa=False))

    def test_attention_param_ordering(self):
        counts = {}
        for label, lrca in (
            ("full", M.LrcaConfig(True, True)),
            ("ca", M.LrcaConfig(True, False)),
            ("sa", M.LrcaConfig(False, True)),
        ):
            cfg = M.CotConfig(arch="1c", lrca=lrca).validate()
            counts[label] = M.count_params(M.init_params(cfg))
        assert counts["full"] > counts["ca"] > counts["sa"]


class TestTBlock:
    def test_zero_layers_is_bitwise_identity(self, rng):
        cfg = toy_config(arch="1t", tblock=M.TBlockConfig(layers=0, heads=2, ff_dim=16))
        params = M.init_params(cfg, dtype=np.float64)
        x = rng.random((2, cfg.c_e, 5, 7))
        out = M.tblock_forward(Tensor(x), params, cfg, index=0).data
        np.testing.assert_array_equal(out, x)

    def test_attention_rows_sum_to_one(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        tokens = Tensor(rng.standard_normal((12, 2, cfg.c_e)))
        _, attn = M.self_attention(tokens, params, "cot.1.layer0", cfg.tblock.heads)
        sums = attn.data.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_token_permutation_equivariance(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, seed=5, dtype=np.float64)
        tokens = rng.standard_normal((10, 1, cfg.c_e))
        base = M.transformer_encode(Tensor(tokens), params, cfg, index=1).data
        perm = rng.permutation(10)
        permuted = M.transformer_encode(Tensor(tokens[perm]), params, cfg, index=1).data
        np.testing.assert_allclose(permuted[np.argsort(perm)], base, atol=1e-6, rtol=0)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError, match="heads"):
            toy_config(c_e=9, tblock=M.TBlockConfig(layers=1, heads=2, ff_dim=16))


class TestCotForward:
    def test_8c4t_block_layout(self):
        cfg = M.CotConfig(arch="8c4t", c_e=16, tblock=M.TBlockConfig(layers=1, heads=2, ff_dim=16)).validate()
        params = M.init_params(cfg)
        names = params.names()
        for i in range(8):
            assert f"cot.{i}.sa.depthwise.weight" in names
            assert f"cot.{i}.layer0.ln1.gamma" not in names
        for i in range(8, 12):
            assert f"cot.{i}.layer0.ln1.gamma" in names
            assert f"cot.{i}.sa.depthwise.weight" not in names

    def test_single_block_passthrough_with_zeroed_branch(self, rng):
        cfg = toy_config(arch="1c")
        params = M.init_params(cfg, dtype=np.float64)
        params["cot.0.sa.depthwise.weight"].data[:] = 0.0
        params["cot.0.sa.depthwise.bias"].data[:] = 0.0
        x = rng.random((1, cfg.c_e, 4, 4))
        out = M.cot_forward(Tensor(x), params, cfg).data
        np.testing.assert_array_equal(out, x)

    def test_grammar_expansion_length(self):
        assert len(M.parse_arch("(2c1t)x4")) == 12


class TestReconstruct:
    def test_shape_law_32_to_96(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        feat = Tensor(rng.random((1, cfg.c_e, 32, 32)))
        out = M.reconstruct(feat, params, cfg)
        assert out.shape == (1, 1, 96, 96)

    def test_zero_weights_constant_bias_image(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        params["recon.conv.weight"].data[:] = 0.0
        params["recon.conv.bias"].data[:] = 0.3
        feat = Tensor(rng.random((1, cfg.c_e, 4, 4)))
        out = M.reconstruct(feat, params, cfg).data
        assert (out == 0.3).all()


class TestForward:
    def test_end_to_end_shape_and_finiteness(self, rng):
        cfg = M.CotConfig(
            k=9, c_e=16, r=3, arch="(1c1t)x1",
            tblock=M.TBlockConfig(layers=1, heads=2, ff_dim=16),
        ).validate()
        params = M.init_params(cfg)
        frames = Tensor(rng.random((1, 9, 1, 32, 32)).astype(np.float32))
        out = M.forward(frames, params, cfg)
        assert out.shape == (1, 1, 96, 96)
        assert np.isfinite(out.data).all()

    def test_shape_law_across_sizes(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        for h, w in ((4, 4), (6, 5), (8, 8)):
            frames = Tensor(rng.random((2, 2, 1, h, w)))
            out = M.forward(frames, params, cfg)
            assert out.shape == (2, 1, 3 * h, 3 * w)

    def test_super_resolve_clamps_and_strips_batch(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        params["recon.conv.weight"].data[:] = 0.0
        params["recon.conv.bias"].data[:] = 50.0  # drive outputs far out of range
        sr = M.super_resolve(rng.random((2, 1, 4, 4)), params, cfg)
        assert sr.shape == (1, 12, 12)
        assert sr.max() <= 1.0 and sr.min() >= 0.0


class TestCountParams:
    def test_single_conv_closed_form(self):
        t = Tensor(np.zeros((4, 1, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        params = M.ModelParams({"recon.conv.weight": t, "recon.conv.bias": b})
        assert M.count_params(params) == 4 * 1 * 9 + 4

    def test_groups_sum_to_total(self):
        cfg = toy_config()
        params = M.init_params(cfg)
        assert params.count("encoder") + params.count("cot") == M.count_params(params)

    def test_invariant_under_forward(self, rng):
        cfg = toy_config()
        params = M.init_params(cfg, dtype=np.float64)
        before = M.count_params(params)
        M.forward(Tensor(rng.random((1, 2, 1, 4, 4))), params, cfg)
        assert M.count_params(params) == before

    def test_default_config_golden_total(self):
        # frozen self-report for the default configuration, documented in
        # the README; any change to default dims must update both
        params = M.init_params(M.CotConfig().validate())
        assert params.count("encoder") == 52553
        assert params.count("cot") == 214344
        assert M.count_params(params) == 266897


class TestArchGrammar:
    @pytest.mark.parametrize("text,length", [("(2c1t)x4", 12), ("8c4t", 12), ("4c4t4c", 12)])
    def test_named_variants(self, text, length):
        assert len(M.parse_arch(text)) == length

    def test_expansion_order(self):
        assert M.parse_arch("(2c1t)x4") == list("cctcctcctcct")
        assert M.parse_arch("8c4t") == ["c"] * 8 + ["t"] * 4
        assert M.parse_arch("4c4t4c") == ["c"] * 4 + ["t"] * 4 + ["c"] * 4

    def test_print_parse_fixed_point(self):
        for text in ("(2c1t)x4", "8c4t", "4c4t4c", "ct", "1c"):
            blocks = M.parse_arch(text)
            assert M.parse_arch(M.format_arch(blocks)) == blocks

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from(["c", "t"]), min_size=1, max_size=30))
    def test_format_parse_roundtrip_property(self, blocks):
        assert M.parse_arch(M.format_arch(blocks)) == blocks

    @pytest.mark.parametrize("bad", ["", "3", "c)x2", "(ct", "(ct)y3", "(ct)x", "q", "2(ct)x1"])
    def test_unparseable_strings_rejected(self, bad):
        with pytest.raises(ConfigError):
            M.parse_arch(bad)


class TestPadFrames:
    def test_exact_count_is_identity(self, rng):
        frames = [rng.random((4, 4)) for _ in range(3)]
        masks = [np.ones((4, 4), bool) for _ in range(3)]
        out_f, out_m = M.pad_frames(frames, masks, 3)
        for a, b in zip(out_f, frames):
            assert a is b

    def test_pad_repeats_clearest_cyclically(self, rng):
        frames = [rng.random((4, 4)) for _ in range(2)]
        m0 = np.ones((10, 10), bool)
        m0[:1] = False  # clearance 0.9
        m1 = np.ones((10, 10), bool)
        m1[:5] = False  # clearance 0.5
        out_f, _ = M.pad_frames(frames, [m0, m1], 4)
        assert [id(f) for f in out_f] == [id(frames[0]), id(frames[1]), id(frames[0]), id(frames[1])]

    def test_truncates_to_clearest(self, rng):
        frames = [rng.random((4, 4)) for _ in range(6)]
        clear = [0.2, 0.9, 0.5, 0.95, 0.1, 0.8]
        masks = []
        for c in clear:
            m = np.zeros(100, bool)
            m[: int(c * 100)] = True
            masks.append(m.reshape(10, 10))
        out_f, _ = M.pad_frames(frames, masks, 4)
        # the four clearest are indices 1,2,3,5, kept in original order
        assert [id(f) for f in out_f] == [id(frames[i]) for i in (1, 2, 3, 5)]

    def test_empty_rejected(self):
        with pytest.raises(DataError, match="empty"):
            M.select_frame_indices([], 3)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        cfg = toy_config()
        params = M.init_params(cfg, seed=11)
        path = tmp_path / "model.cotm"
        M.save_checkpoint(path, params, "model.arch = (1c1t)x1\n")
        text, arrays = M.load_checkpoint(path)
        assert text == "model.arch = (1c1t)x1\n"
        assert list(arrays) == params.names()
        for name, t in params.items():
            np.testing.assert_array_equal(arrays[name], t.data.astype(np.float32))

    def test_save_twice_identical_bytes(self, tmp_path):
        cfg = toy_config()
        params = M.init_params(cfg, seed=2)
        a, b = tmp_path / "a.cotm", tmp_path / "b.cotm"
        M.save_checkpoint(a, params, "x = 1\n")
        M.save_checkpoint(b, params, "x = 1\n")
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cotm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            M.load_checkpoint(path)


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs,match",
        [
            (dict(k=0), "k must be"),
            (dict(c_e=1), "exceed"),
            (dict(r=1), "upscale"),
            (dict(arch="zz"), "architecture"),
        ],
    )
    def test_invalid_configs_rejected(self, kwargs, match):
        with pytest.raises(ConfigError, match=match):
            toy_config(**kwargs)
