import numpy as np
import pytest

from tfctx import backbone, blocks
from tfctx import tensor as T
from tfctx.errors import DataError, ShapeError
from tfctx.tensor import Tensor


def make_gcm_factory(**kwargs):
    seeds = iter(range(100, 10_000))

    def factory(channels):
        return blocks.GcmBlock(channels, rng=np.random.default_rng(next(seeds)), **kwargs)

    return factory


def toy_embedder(make_gcm=None, insertion="after_bn", seed=0, **overrides):
    kwargs = dict(mel_bins=16, stage_channels=[4, 4, 8, 8], blocks_per_stage=[1, 1, 1, 1],
                  stage_strides=[1, 2, 2, 1], stem_stride=(2, 2), embed_dim=8, asp_hidden=4,
                  make_gcm=make_gcm, insertion=insertion, rng=np.random.default_rng(seed))
    kwargs.update(overrides)
    return backbone.Embedder(**kwargs)


class TestResidualBlock:
    def test_zero_branch_is_relu_identity(self):
        block = backbone.ResidualBlock(3, 3, 1, rng=np.random.default_rng(1))
        block.conv1.weight.data[:] = 0.0
        block.conv2.weight.data[:] = 0.0
        x = np.random.default_rng(2).normal(size=(2, 3, 4, 5))
        out = block(Tensor(x), training=True)
        np.testing.assert_allclose(out.data, np.maximum(x, 0.0), atol=1e-12)

    def test_after_bn_gap_zero_transform_halves_branch(self):
        rng = np.random.default_rng(3)
        gcm = blocks.GcmBlock(3, kind="gap", transform="fc", reduction=1, rng=rng)
        gcm.transform.w_in.data[:] = 0.0
        gcm.transform.w_out.data[:] = 0.0
        with_gcm = backbone.ResidualBlock(3, 3, 1, gcm, "after_bn", np.random.default_rng(4))
        without = backbone.ResidualBlock(3, 3, 1, rng=np.random.default_rng(4))
        x = np.random.default_rng(5).normal(size=(2, 3, 4, 5))

        # replay the plain branch by hand: halved before the residual add
        y_plain = without.bn2(without.conv2(
            T.relu(without.bn1(without.conv1(Tensor(x)), True))), True)
        want = np.maximum(0.5 * y_plain.data + x, 0.0)
        np.testing.assert_allclose(with_gcm(Tensor(x), True).data, want, atol=1e-12)

    @pytest.mark.parametrize("insertion", ["after_bn", "before_bn", "before_conv"])
    def test_insertion_positions_same_shape(self, insertion):
        width = 4 if insertion == "before_conv" else 6  # before_conv sees the block input
        gcm = blocks.GcmBlock(width, kind="attention", transform="fc", reduction=2,
                              rng=np.random.default_rng(6))
        block = backbone.ResidualBlock(4, 6, 2, gcm, insertion, np.random.default_rng(7))
        out = block(Tensor(np.random.default_rng(8).normal(size=(2, 4, 8, 9))), True)
        assert out.shape == (2, 6, 4, 5)

    def test_insertion_none_requires_no_gcm(self):
        gcm = blocks.GcmBlock(4, reduction=2, rng=np.random.default_rng(9))
        with pytest.raises(ValueError):
            backbone.ResidualBlock(4, 4, 1, gcm, "none")
        with pytest.raises(ValueError):
            backbone.ResidualBlock(4, 4, 1, None, "after_bn")


class TestAspPool:
    def test_constant_frames(self):
        pool = backbone.AttentiveStatsPool(3, 2, np.random.default_rng(10))
        frames = Tensor(np.full((3, 7), 1.5))
        out = backbone.asp_pool(frames, pool)
        np.testing.assert_allclose(out.data[:3], 1.5, atol=1e-12)
        np.testing.assert_allclose(out.data[3:], 0.0, atol=2e-4)  # sqrt of the variance floor

    def test_zero_logits_is_uniform_stats(self):
        pool = backbone.AttentiveStatsPool(3, 2, np.random.default_rng(11))
        pool.proj.data[:] = 0.0
        pool.proj_bias.data[:] = 0.0
        x = np.random.default_rng(12).normal(size=(3, 9))
        out = backbone.asp_pool(Tensor(x), pool)
        mu = x.mean(axis=1)
        sigma = np.sqrt(np.maximum((x * x).mean(axis=1) - mu ** 2, pool.VAR_FLOOR))
        np.testing.assert_allclose(out.data, np.concatenate([mu, sigma]), atol=1e-12)

    def test_matches_weighted_moment_oracle(self):
        pool = backbone.AttentiveStatsPool(4, 3, np.random.default_rng(13))
        x = np.random.default_rng(14).normal(size=(4, 6))
        out = backbone.asp_pool(Tensor(x), pool)

        scores = np.array([
            pool.score_vec.data @ np.tanh(pool.proj.data @ x[:, t] + pool.proj_bias.data)
            + pool.score_bias.data[0]
            for t in range(6)
        ])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        mu = x @ w
        var = (x * x) @ w - mu ** 2
        sigma = np.sqrt(np.maximum(var, pool.VAR_FLOOR))
        np.testing.assert_allclose(out.data, np.concatenate([mu, sigma]), atol=1e-10)

    def test_gradients(self):
        pool = backbone.AttentiveStatsPool(3, 2, np.random.default_rng(15))
        x = np.random.default_rng(16).normal(size=(1, 3, 5))
        target = Tensor(np.random.default_rng(17).normal(size=(1, 6)))
        fn = lambda t: T.mul(pool(t), target).sum()
        assert T.finite_diff_check(fn, Tensor(x)) < 1e-4


class TestEmbedder:
    def test_unit_norm_output(self):
        emb = toy_embedder()
        x = Tensor(np.random.default_rng(18).normal(size=(3, 1, 16, 20)))
        out = emb.embed(x)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)
        assert out.shape == (3, 8)

    def test_embed_utterance_contract(self):
        emb = toy_embedder(seed=1)
        feats = Tensor(np.random.default_rng(19).normal(size=(1, 16, 24)))
        vec = backbone.embed_utterance(feats, emb)
        assert vec.shape == (8,)
        assert np.linalg.norm(vec.data) == pytest.approx(1.0, abs=1e-6)

    def test_deterministic_bit_for_bit(self):
        feats = np.random.default_rng(20).normal(size=(1, 16, 24))
        outs = []
        for _ in range(2):
            emb = toy_embedder(seed=7)
            outs.append(backbone.embed_utterance(Tensor(feats.copy()), emb).data.tobytes())
        assert outs[0] == outs[1]

    def test_wrong_mel_bins_rejected(self):
        emb = toy_embedder()
        with pytest.raises(ShapeError):
            emb.forward(Tensor(np.zeros((1, 1, 12, 20))))

    @pytest.mark.parametrize("kind,tfe", [("gap", False), ("attention", False),
                                          ("attention", True), ("multi_dct", True)])
    def test_gcm_variants_preserve_shapes(self, kind, tfe):
        factory = make_gcm_factory(kind=kind, transform="fc", reduction=2,
                                   dct_grid=(2, 3), dct_components=2, tfe=tfe, tfe_groups=2)
        emb = toy_embedder(make_gcm=factory, seed=2)
        plain = toy_embedder(seed=2)
        x = Tensor(np.random.default_rng(21).normal(size=(2, 1, 16, 20)))
        assert emb.embed(x).shape == plain.embed(x).shape

    def test_last_stage_only(self):
        factory = make_gcm_factory(kind="gap", transform="fc", reduction=2)
        emb = toy_embedder(make_gcm=factory, gcm_stages="last", seed=3)
        names = [n for n, _ in emb.named_parameters() if ".gcm." in n]
        assert names and all(n.startswith("stage3.") for n in names)


class TestParameterCount:
    @pytest.mark.parametrize("gcm_kwargs,gcm_stages", [
        (None, "all"),
        (dict(kind="gap", transform="fc", reduction=2), "all"),
        (dict(kind="attention", transform="fc", reduction=2, tfe=True, tfe_groups=2), "all"),
        (dict(kind="attention", transform="conv1d"), "last"),
    ])
    def test_actual_equals_analytic(self, gcm_kwargs, gcm_stages):
        factory = make_gcm_factory(**gcm_kwargs) if gcm_kwargs else None
        emb = toy_embedder(make_gcm=factory, gcm_stages=gcm_stages, seed=4)

        counter = None
        if gcm_kwargs:
            counter = lambda c: blocks.analytic_gcm_count(
                c, kind=gcm_kwargs.get("kind", "gap"),
                transform=gcm_kwargs.get("transform", "fc"),
                reduction=gcm_kwargs.get("reduction", 16),
                tfe=gcm_kwargs.get("tfe", False),
                tfe_groups=gcm_kwargs.get("tfe_groups", 8))
        want = backbone.analytic_embedder_count(
            16, [4, 4, 8, 8], [1, 1, 1, 1], [1, 2, 2, 1], 2, 8, 4,
            gcm_counter=counter, gcm_stages=gcm_stages)
        assert emb.parameter_count() == want


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        emb = toy_embedder(seed=5)
        # make stats non-trivial
        emb.forward(Tensor(np.random.default_rng(22).normal(size=(2, 1, 16, 20))), training=True)
        path = str(tmp_path / "model.ckpt")
        entries = [(n, p.data) for n, p in emb.named_parameters()] + list(emb.named_state())
        config = {"seed": 5, "note": "toy"}
        backbone.save_checkpoint(path, entries, config)

        loaded_config, arrays = backbone.load_checkpoint(path)
        assert loaded_config == config
        for name, arr in entries:
            assert arrays[name].tobytes() == np.asarray(arr).tobytes()

        # loading into a differently seeded model reproduces outputs exactly
        other = toy_embedder(seed=99)
        other.load_arrays(arrays)
        x = Tensor(np.random.default_rng(23).normal(size=(1, 1, 16, 20)))
        np.testing.assert_array_equal(other.embed(x).data, emb.embed(x).data)

    def test_save_twice_identical_bytes(self, tmp_path):
        emb = toy_embedder(seed=6)
        entries = [(n, p.data) for n, p in emb.named_parameters()] + list(emb.named_state())
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        backbone.save_checkpoint(p1, entries, {"x": 1})
        backbone.save_checkpoint(p2, entries, {"x": 1})
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_mismatched_checkpoint_rejected(self, tmp_path):
        emb = toy_embedder(seed=7)
        path = str(tmp_path / "model.ckpt")
        backbone.save_checkpoint(path, [("bogus", np.zeros(3))], {})
        _, arrays = backbone.load_checkpoint(path)
        with pytest.raises(DataError):
            emb.load_arrays(arrays)

    def test_missing_file(self):
        with pytest.raises(DataError):
            backbone.load_checkpoint("/nonexistent/model.ckpt")
