import numpy as np
import pytest

from trigen import autodiff as ad
from trigen import generator as gen
from trigen.autodiff import Tape, Tensor
from trigen.triplane import Bounds

DESK = gen.GeneratorConfig(d_t=4, r=8, n_blocks=2, d_p=8)


@pytest.fixture
def bounds():
    return Bounds.cube(1.0)


class TestConfig:
    def test_paper_scale_resolution(self):
        assert gen.GeneratorConfig(r=20, n_blocks=5).resolution == 320

    def test_desk_scale_resolution(self):
        assert gen.GeneratorConfig(r=16, n_blocks=3).resolution == 64


class TestNoiseTokens:
    def test_same_seed_identical(self):
        a = gen.init_noise_tokens(DESK, 7)
        b = gen.init_noise_tokens(DESK, 7)
        np.testing.assert_array_equal(a.tokens, b.tokens)
        assert a.seed == 7

    def test_standard_normal_statistics(self):
        cfg = gen.GeneratorConfig(d_t=32, r=36, n_blocks=2, d_p=8)  # ~1.2e5 draws
        t = gen.init_noise_tokens(cfg, 3).tokens
        assert abs(t.mean()) < 0.02
        assert abs(t.std() - 1.0) < 0.02

    def test_tokens_never_receive_gradient(self, bounds):
        tokens = gen.init_noise_tokens(DESK, 1)
        state = gen.init_generator(DESK, 2)
        with Tape() as tape:
            tok = Tensor(tokens.tokens)  # not watched: constant by construction
            tri = gen.generate(state, tok, DESK, bounds)
            tape.backward(ad.tsum(tri.planes[0]))
        assert tok.nid is None
        with pytest.raises(ValueError):
            tape.grad(tok)


class TestTextureEmbedding:
    def _setup(self, rng):
        cfg = gen.GeneratorConfig(d_t=4, r=8, n_blocks=2, d_p=8,
                                  use_texture_embedding=True, d_feat=8, patch_size=8)
        state = gen.init_generator(cfg, 5)
        tokens = gen.init_noise_tokens(cfg, 6)
        img = rng.random((32, 32, 3))
        return cfg, state, tokens, img

    def test_zero_value_projection_is_identity(self, rng):
        cfg, state, tokens, img = self._setup(rng)
        state.ste_params["attn.wv"] = np.zeros_like(state.ste_params["attn.wv"])
        feats = gen.encode_image(img, state.ste_params, cfg.patch_size)
        out = gen.texture_embed(tokens, feats, state.ste_params)
        np.testing.assert_allclose(out.data, tokens.tokens, atol=1e-12)

    def test_output_shape_matches_tokens(self, rng):
        cfg, state, tokens, img = self._setup(rng)
        feats = gen.encode_image(img, state.ste_params, cfg.patch_size)
        out = gen.texture_embed(tokens, feats, state.ste_params)
        assert out.shape == tokens.tokens.shape

    def test_attention_rows_sum_to_one(self, rng):
        scores = Tensor(rng.normal(size=(10, 7)) * 3.0)
        att = gen._softmax_rows(scores)
        np.testing.assert_allclose(att.data.sum(axis=1), np.ones(10), atol=1e-12)


class TestEncodeImage:
    def _params(self, rng, d_feat=8, p=8):
        fi = p * p * 3
        return {"embed.w": rng.normal(0, 0.1, size=(fi, d_feat)),
                "embed.b": np.zeros(d_feat)}

    def test_token_count(self, rng):
        out = gen.encode_image(rng.random((64, 64, 3)), self._params(rng), 8)
        assert out.shape == (64, 8)

    def test_constant_image_tokens_equal_up_to_position_encoding(self, rng):
        p = self._params(rng)
        out = gen.encode_image(np.full((32, 32, 3), 0.5), p, 8).data
        pos = gen.sinusoidal_position_encoding(4, 4, 8)
        np.testing.assert_allclose(out - pos, np.tile((out - pos)[0], (16, 1)), atol=1e-12)

    def test_deterministic(self, rng):
        p = self._params(rng)
        img = rng.random((32, 32, 3))
        a = gen.encode_image(img, p, 8).data
        b = gen.encode_image(img, p, 8).data
        np.testing.assert_array_equal(a, b)

    def test_image_smaller_than_patch_rejected(self, rng):
        with pytest.raises(Exception):
            gen.encode_image(rng.random((4, 4, 3)), self._params(rng), 8)


class TestGenerate:
    def test_output_shape_and_determinism(self, bounds):
        state = gen.init_generator(DESK, 3)
        tokens = gen.init_noise_tokens(DESK, 4)
        tri = gen.generate(state, Tensor(tokens.tokens), DESK, bounds)
        assert [p.shape for p in tri.planes] == [(8, 16, 16)] * 3
        tri2 = gen.generate(state, Tensor(tokens.tokens), DESK, bounds)
        for a, b in zip(tri.planes, tri2.planes):
            np.testing.assert_array_equal(a.data, b.data)

    def test_kernel_gradient_vs_finite_differences(self, bounds):
        state = gen.init_generator(DESK, 3)
        tokens = gen.init_noise_tokens(DESK, 4)
        name = "up0.c1.w"

        def f(w):
            pp = [dict(d) for d in state.plane_params]
            pp[0][name] = w
            tri = gen.generate(gen.GeneratorState(pp), Tensor(tokens.tokens), DESK, bounds)
            return ad.tsum(ad.sin(tri.planes[0]))

        assert ad.grad_check(f, Tensor(state.plane_params[0][name])) < 1e-5

    def test_per_plane_independence(self, bounds):
        state = gen.init_generator(DESK, 3)
        tokens = gen.init_noise_tokens(DESK, 4)
        base = gen.generate(state, Tensor(tokens.tokens), DESK, bounds)
        bumped = gen.GeneratorState([dict(d) for d in state.plane_params])
        bumped.plane_params[1] = {k: v + 0.1 for k, v in bumped.plane_params[1].items()}
        out = gen.generate(bumped, Tensor(tokens.tokens), DESK, bounds)
        np.testing.assert_array_equal(base.planes[0].data, out.planes[0].data)
        np.testing.assert_array_equal(base.planes[2].data, out.planes[2].data)
        assert not np.allclose(base.planes[1].data, out.planes[1].data)

    def test_attention_toggle_changes_output_but_not_shape(self, bounds):
        cfg_on = gen.GeneratorConfig(d_t=4, r=8, n_blocks=2, d_p=8, use_attention=True)
        cfg_off = gen.GeneratorConfig(d_t=4, r=8, n_blocks=2, d_p=8, use_attention=False)
        tokens = gen.init_noise_tokens(cfg_on, 4)
        on = gen.generate(gen.init_generator(cfg_on, 3), Tensor(tokens.tokens), cfg_on, bounds)
        off = gen.generate(gen.init_generator(cfg_off, 3), Tensor(tokens.tokens), cfg_off, bounds)
        assert on.planes[0].shape == off.planes[0].shape

    def test_wrong_token_shape_rejected(self, bounds):
        state = gen.init_generator(DESK, 3)
        with pytest.raises(Exception):
            gen.generate(state, Tensor(np.zeros((3, 4, 4, 4))), DESK, bounds)


class TestGlobalUpdateProperty:
    def test_single_query_reaches_most_generator_parameters(self, bounds):
        """One interpolated feature's loss backpropagates into >= 90% of the
        generator weights, while a direct plane sees <= 4 cells per plane."""
        from trigen.nnops import grid_sample_bilinear

        state = gen.init_generator(DESK, 3)
        tokens = gen.init_noise_tokens(DESK, 4)
        uv = Tensor(np.array([[0.31, -0.42]]))

        with Tape() as tape:
            lifted = [{k: tape.watch(Tensor(v)) for k, v in pp.items()}
                      for pp in state.plane_params]
            tri = gen.generate(gen.GeneratorState(lifted), Tensor(tokens.tokens),
                               DESK, bounds)
            loss = sum((ad.tsum(grid_sample_bilinear(p, uv)) for p in tri.planes),
                       start=Tensor(0.0))
            tape.backward(loss)
        total = touched = 0
        for pp in lifted:
            for t in pp.values():
                g = tape.grad(t)
                total += g.size
                touched += (g != 0).sum()
        assert touched / total >= 0.90

        with Tape() as tape:
            plane = tape.watch(Tensor(np.random.default_rng(0).normal(size=(8, 16, 16))))
            tape.backward(ad.tsum(grid_sample_bilinear(plane, uv)))
        g = tape.grad(plane)
        assert all((np.abs(g[c]) > 0).sum() <= 4 for c in range(8))
