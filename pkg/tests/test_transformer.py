import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrvit.backbone import BackboneConfig, FeatureCorpus
from cxrvit.gradcheck import check_gradients
from cxrvit.model import default_vit_config, encode, full_forward, init_model_state, predict_proba
from cxrvit.tensor import Tensor, no_grad
from cxrvit.transformer import (
    TransformerConfig,
    assemble,
    classify,
    encoder_layer,
    init_transformer_params,
    project,
    transformer_forward,
)

from conftest import tiny_backbone_config, tiny_vit_config


def make(rng, **kw):
    cfg = TransformerConfig(**{"dim": 8, "layers": 2, "heads": 2, "in_channels": 6, "grid": (2, 3), **kw})
    return cfg, init_transformer_params(cfg, rng)


def corpus(rng, n=2, c=6, h=2, w=3):
    return FeatureCorpus(Tensor(rng.normal(size=(n, c, h, w))))


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        TransformerConfig(dim=10, heads=4)


def test_init_scheme(rng):
    cfg, params = make(rng, dim=64, heads=4)
    assert np.all(params["vit.pos_embed"].data == 0)
    assert np.all(params["vit.layers.0.attn.qkv.bias"].data == 0)
    assert np.all(params["vit.layers.1.ln2.gain"].data == 1)
    w = params["vit.layers.0.mlp.fc1.weight"].data
    assert np.abs(w).max() <= 0.04
    assert w.std() == pytest.approx(0.02 * 0.8796, rel=0.05)  # std of N(0,1) truncated at +-2


class TestProject:
    def test_identity(self, rng):
        cfg, params = make(rng, dim=6)
        params["vit.proj.weight"].data[...] = np.eye(6)[:, :, None, None]
        c = corpus(rng)
        np.testing.assert_array_equal(project(c, params).data, c.tokens().data)

    def test_zero(self, rng):
        cfg, params = make(rng)
        params["vit.proj.weight"].data[...] = 0
        assert np.all(project(corpus(rng), params).data == 0)

    def test_row_major(self, rng):
        cfg, params = make(rng)
        c = corpus(rng)
        tokens = project(c, params).data
        w = params["vit.proj.weight"].data[:, :, 0, 0]
        for i in range(6):
            np.testing.assert_allclose(tokens[:, i], c.feature_map.data[:, :, i // 3, i % 3] @ w.T, atol=1e-14)

    def test_channel_mismatch(self, rng):
        cfg, params = make(rng)
        with pytest.raises(ValueError, match="channels"):
            project(corpus(rng, c=5), params)


class TestAssemble:
    def test_zero_embedding(self, rng):
        tokens = Tensor(rng.normal(size=(2, 6, 8)))
        cls = Tensor(rng.normal(size=(1, 8)))
        z = assemble(tokens, cls, Tensor(np.zeros((7, 8)))).data
        np.testing.assert_array_equal(z[:, 1:], tokens.data)
        np.testing.assert_array_equal(z[:, 0], np.broadcast_to(cls.data, (2, 8)))

    def test_embedding_only(self, rng):
        pos = rng.normal(size=(7, 8))
        z = assemble(Tensor(np.zeros((2, 6, 8))), Tensor(np.zeros((1, 8))), Tensor(pos)).data
        np.testing.assert_array_equal(z[0], pos)
        np.testing.assert_array_equal(z[1], pos)

    def test_position_sensitivity(self, rng):
        tokens = rng.normal(size=(1, 6, 8))
        cls, pos = Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(7, 8)))
        perm = rng.permutation(6)
        while np.all(perm == np.arange(6)):
            perm = rng.permutation(6)
        a = assemble(Tensor(tokens), cls, pos).data
        b = assemble(Tensor(tokens[:, perm]), cls, pos).data
        # a permutation of the token rows alone cannot reproduce z_0
        assert not np.allclose(np.sort(a, axis=1), np.sort(b, axis=1))
        assert not np.allclose(a[:, 1:][:, perm], b[:, 1:])

    def test_length_mismatch(self, rng):
        with pytest.raises(ValueError, match="positional"):
            assemble(Tensor(np.zeros((1, 6, 8))), Tensor(np.zeros((1, 8))), Tensor(np.zeros((6, 8))))


def _zero_outputs(params, layers):
    for i in range(layers):
        for n in ("attn.out", "mlp.fc2"):
            params[f"vit.layers.{i}.{n}.weight"].data[...] = 0
            params[f"vit.layers.{i}.{n}.bias"].data[...] = 0


class TestEncoderLayer:
    def test_residual_identity(self, rng):
        cfg, params = make(rng)
        _zero_outputs(params, cfg.layers)
        z = Tensor(rng.normal(size=(2, 7, 8)))
        out, _ = encoder_layer(z, params, 0, cfg)
        np.testing.assert_array_equal(out.data, z.data)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), layers=st.integers(1, 3), heads=st.sampled_from([1, 2, 4]))
    def test_stack_identity_property(self, seed, layers, heads):
        rng = np.random.default_rng(seed)
        cfg, params = make(rng, layers=layers, heads=heads)
        _zero_outputs(params, layers)
        c = corpus(rng, n=1)
        z0 = assemble(project(c, params), params["vit.cls_token"], params["vit.pos_embed"])
        z = z0
        for i in range(layers):
            z, _ = encoder_layer(z, params, i, cfg)
        np.testing.assert_array_equal(z.data, z0.data)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100.0))
    def test_attention_rows_are_simplexes(self, seed, scale):
        rng = np.random.default_rng(seed)
        cfg, params = make(rng, init_std=1.0)
        c = FeatureCorpus(Tensor(scale * rng.normal(size=(2, 6, 2, 3))))
        _, attn = transformer_forward(c, params, cfg)
        for a in attn:
            assert np.all(a.data >= 0)
            np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_layer_gradcheck(self, rng):
        cfg, params = make(rng, init_std=0.5)
        z = Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True)
        names = [n for n in params if n.startswith("vit.layers.0.")]
        weights = rng.normal(size=(2, 7, 8))
        errs = check_gradients(lambda: encoder_layer(z, params, 0, cfg)[0] * weights, [z] + [params[n] for n in names])
        assert max(errs.values()) < 1e-4


class TestClassify:
    def test_zero_head(self, rng):
        cfg, params = make(rng)
        params["vit.head.weight"].data[...] = 0
        params["vit.head.bias"].data[...] = [0.5, -1.0, 2.0]
        logits, _ = transformer_forward(corpus(rng), params, cfg)
        np.testing.assert_array_equal(logits.data, [[0.5, -1.0, 2.0]] * 2)

    def test_reads_class_token_only(self, rng):
        cfg, params = make(rng)
        z = rng.normal(size=(1, 7, 8))
        before = classify(Tensor(z), params).data
        z[0, 1:] += rng.normal(size=(6, 8)) * 10
        np.testing.assert_array_equal(classify(Tensor(z), params).data, before)

    def test_softmax_sums_to_one(self, rng):
        b = tiny_backbone_config()
        state = init_model_state(b, rng, tiny_vit_config(b))
        probs = predict_proba(state, rng.normal(size=(3, 1, 64, 64)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


class TestFullForward:
    def test_desk_shapes(self, rng):
        b = BackboneConfig.desk()
        state = init_model_state(b, rng, default_vit_config(b))
        logits, trace = full_forward(rng.uniform(size=(128, 128)), state)
        assert logits.shape == (1, 3)
        assert trace.attentions[0].shape == (1, 8, 17, 17)
        assert len(trace.attentions) == 4

    @pytest.mark.slow
    def test_full_shapes(self, rng):
        b = BackboneConfig.full()
        state = init_model_state(b, rng, default_vit_config(b, dim=64))
        x = Tensor(rng.normal(size=(1, 1, 512, 512)))
        with no_grad():
                c = encode(state, x)
        assert c.feature_map.shape == (1, 1024, 16, 16)
        logits, trace = full_forward(x, state)
        assert trace.attentions[0].shape[-1] == 257
        assert logits.shape == (1, 3)

    def test_deterministic(self, tiny_state, rng):
        img = rng.uniform(size=(80, 70))
        a, _ = full_forward(img, tiny_state)
        b, _ = full_forward(img, tiny_state)
        assert a.data.tobytes() == b.data.tobytes()

    def test_grid_mismatch(self, tiny_state, rng):
        with pytest.raises(ValueError, match="grid"):
            full_forward(Tensor(rng.normal(size=(1, 1, 96, 96))), tiny_state)

    def test_gradient_capture_does_not_leak(self, tiny_state, rng):
        x = Tensor(rng.normal(size=(2, 1, 64, 64)))
        plain, _ = full_forward(x, tiny_state)
        logits, trace = full_forward(x, tiny_state, target_class=2)
        np.testing.assert_array_equal(plain.data, logits.data)
        assert all(g.shape == a.shape for g, a in zip(trace.gradients, trace.attentions))
        assert all(p.grad is None or not np.any(p.grad) for p in tiny_state.params.values())

    def test_end_to_end_gradcheck(self, rng):
        b = tiny_backbone_config()
        state = init_model_state(b, rng, tiny_vit_config(b, init_std=0.3))
        assert state.vit_cfg.grid == (2, 2)
        x = Tensor(rng.uniform(-1, 1, size=(2, 1, 64, 64)))
        weights = rng.normal(size=(2, 3))
        vit = [n for n in state.params if n.startswith("vit.")]
        rest = [n for n in state.params if not n.startswith("vit.") and not n.startswith("pcam.")]

        def fn():
            logits, _ = transformer_forward(encode(state, x), state.params, state.vit_cfg)
            return logits * weights

        # the corpus does not depend on transformer parameters, so encode it once for that half
        with no_grad():
            fixed = FeatureCorpus(Tensor(encode(state, x).feature_map.data))

        def vit_fn():
            return transformer_forward(fixed, state.params, state.vit_cfg)[0] * weights

        errs = check_gradients(vit_fn, [state.params[n] for n in vit])
        assert max(errs.values()) < 1e-4
        assert errs[vit.index("vit.cls_token")] < 1e-4 and errs[vit.index("vit.pos_embed")] < 1e-4
        errs = check_gradients(fn, [state.params[n] for n in rest], max_entries=6)
        assert max(errs.values()) < 1e-4
