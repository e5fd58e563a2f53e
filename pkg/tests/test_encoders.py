import numpy as np
import pytest

from umcl.encoders import (
    BANK,
    TOKEN_TABLE,
    DualEncoder,
    EncoderDims,
    ParameterStore,
    StaleCacheError,
    TextBatch,
    encode_image,
    encode_text,
    init_parameters,
)
from umcl.prompt import PromptBuilder, Vocabulary, assemble_prompt, builtin_registry

DIMS = EncoderDims(vocab_size=53, token_dim=6, hidden_dim=9, embed_dim=7, image_dim=5,
                   context_length=3)


@pytest.fixture
def params():
    return init_parameters(DIMS, np.random.default_rng(0))


def snapshot(store):
    return {k: g.copy() for k, g in store.grads.items()}


class TestParameterStore:
    def test_unique_names(self):
        s = ParameterStore()
        s.add("a", np.zeros(2))
        with pytest.raises(KeyError):
            s.add("a", np.zeros(2))

    def test_layout(self, params):
        assert params[TOKEN_TABLE].shape == (53, 6)
        assert params[BANK].shape == (3, 6)
        assert all(params.grads[k].shape == params[k].shape for k in params)
        assert all(params[k].dtype == np.float64 for k in params)

    def test_bank_init_scale(self):
        p = init_parameters(EncoderDims(context_length=200, token_dim=50), np.random.default_rng(0))
        assert abs(p[BANK].std() - 0.02) < 0.002

    def test_zero_grad(self, params):
        for g in params.grads.values():
            g += 1.0
        params.zero_grad()
        assert all(not g.any() for g in params.grads.values())


class TestImageEncoder:
    def test_unit_norm_and_purity(self, params, rng):
        x = rng.normal(size=(6, 5)) * 10
        model = DualEncoder(params)
        a, _ = model.encode_images(x)
        b, _ = model.encode_images(x)
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-6)
        assert np.array_equal(a, b)
        np.testing.assert_allclose(encode_image(x[0], params), a[0], atol=1e-14)

    def test_dimension_mismatch(self, params):
        with pytest.raises(ValueError):
            DualEncoder(params).encode_images(np.zeros((2, 4)))

    def test_small_weights_preserve_direction(self, params, rng):
        # near the origin tanh is the identity, so scaling the input scales the hidden layer
        params["image.W1"][:] *= 1e-6
        x = rng.normal(size=5)
        h1 = np.tanh(params["image.W1"] @ x + params["image.b1"])
        h2 = np.tanh(params["image.W1"] @ (2 * x) + params["image.b1"])
        np.testing.assert_allclose(h2, 2 * h1, rtol=1e-9)
        np.testing.assert_allclose(encode_image(2 * x, params), encode_image(x, params), atol=1e-9)


class TestTextEncoder:
    def test_unit_norm(self, params, rng):
        ids = rng.integers(2, 53, size=(4, 8))
        ids[:, 5:] = 0
        emb, _ = DualEncoder(params).encode_texts(TextBatch.prompts(ids, 3))
        np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)

    def test_mean_pool_is_order_invariant(self, params):
        ids = np.array([[5, 9, 17, 0, 0], [17, 5, 9, 0, 0], [0, 9, 0, 17, 5]])
        emb, _ = DualEncoder(params).encode_texts(TextBatch.captions(ids))
        np.testing.assert_allclose(emb[0], emb[1], atol=1e-15)
        np.testing.assert_allclose(emb[0], emb[2], atol=1e-15)

    def test_batched_matches_explicit_sequence(self, params):
        builder = PromptBuilder(builtin_registry(2), Vocabulary(53), 3)
        seq = assemble_prompt(1, params[BANK], builder, 2, params[TOKEN_TABLE])
        tail = builder.class_tail(1, 2)
        emb, _ = DualEncoder(params).encode_texts(TextBatch.prompts(builder.pad([tail]), 3))
        np.testing.assert_allclose(encode_text(seq, params), emb[0], atol=1e-12)

    def test_sequence_width_checked(self, params):
        builder = PromptBuilder(builtin_registry(1), Vocabulary(53), 0)
        seq = assemble_prompt(0, np.zeros((0, 4)), builder, 0, np.zeros((53, 4)))
        with pytest.raises(ValueError, match="width"):
            encode_text(seq, params)

    def test_empty_row_rejected(self, params):
        with pytest.raises(ValueError, match="empty"):
            DualEncoder(params).encode_texts(TextBatch.captions(np.zeros((1, 4), dtype=int)))

    def test_out_of_vocabulary(self, params):
        with pytest.raises(ValueError, match="vocabulary"):
            DualEncoder(params).encode_texts(TextBatch.captions(np.array([[60]])))


class TestBackward:
    def forward(self, params, rng):
        model = DualEncoder(params)
        ids = rng.integers(2, 53, size=(3, 6))
        ids[0, 4:] = 0
        t, tc = model.encode_texts(TextBatch.prompts(ids, 3))
        v, vc = model.encode_images(rng.normal(size=(3, 5)))
        return model, tc, vc

    def test_zero_upstream_leaves_slots(self, params, rng):
        model, tc, vc = self.forward(params, rng)
        model.backward_texts(tc, np.zeros((3, 7)))
        model.backward_images(vc, np.zeros((3, 7)))
        assert all(not g.any() for g in params.grads.values())

    def test_accumulation_is_additive(self, params, rng):
        g1, g2 = rng.normal(size=(3, 7)), rng.normal(size=(3, 7))
        model, tc, _ = self.forward(params, np.random.default_rng(5))
        model.backward_texts(tc, g1)
        only1 = snapshot(params)
        params.zero_grad()
        model, tc, _ = self.forward(params, np.random.default_rng(5))
        model.backward_texts(tc, g2)
        only2 = snapshot(params)
        params.zero_grad()
        for g in (g1, g2):
            model, tc, _ = self.forward(params, np.random.default_rng(5))
            model.backward_texts(tc, g)
        for k in params:
            np.testing.assert_allclose(params.grads[k], only1[k] + only2[k], atol=1e-14)

    def test_bank_gradient_by_finite_difference(self, params, rng):
        ids = rng.integers(2, 53, size=(2, 5))
        batch = TextBatch.prompts(ids, 3)
        w = rng.normal(size=(2, 7))
        model = DualEncoder(params)
        emb, cache = model.encode_texts(batch)
        model.backward_texts(cache, w)
        bank = params[BANK]
        h = 1e-5
        for idx in [(0, 0), (2, 5), (1, 3)]:
            old = bank[idx]
            bank[idx] = old + h
            up = (model.encode_texts(batch)[0] * w).sum()
            bank[idx] = old - h
            down = (model.encode_texts(batch)[0] * w).sum()
            bank[idx] = old
            assert params.grads[BANK][idx] == pytest.approx((up - down) / (2 * h), rel=1e-6)

    def test_captions_leave_bank_alone(self, params, rng):
        model = DualEncoder(params)
        _, cache = model.encode_texts(TextBatch.captions(rng.integers(2, 53, size=(2, 4))))
        model.backward_texts(cache, rng.normal(size=(2, 7)))
        assert not params.grads[BANK].any()

    def test_backward_without_forward(self, params):
        with pytest.raises(StaleCacheError):
            DualEncoder(params).backward_images(None, np.zeros((1, 7)))

    def test_stale_and_reused_cache(self, params, rng):
        model, tc, vc = self.forward(params, rng)
        model.backward_images(vc, np.ones((3, 7)))
        with pytest.raises(StaleCacheError, match="consumed"):
            model.backward_images(vc, np.ones((3, 7)))
        params.bump()
        with pytest.raises(StaleCacheError, match="predates"):
            model.backward_texts(tc, np.ones((3, 7)))
