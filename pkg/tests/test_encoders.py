import numpy as np
import pytest

from logofuse import tensor as T
from logofuse.data import ImageRecord
from logofuse.encoders import (PAD_ID, UNK_ID, EncoderConfig, TextEncoder, TokenMatrix, VisualEncoder, build_vocab,
                               encode_image, encode_text, patchify, pool, tokenize)
from logofuse.errors import DegenerateInputError, DimensionError, ValidationError
from logofuse.tensor import Tensor


def test_tokenize_empty_is_all_pad():
    seq = tokenize("", {}, 5)
    assert (seq.ids == PAD_ID).all() and not seq.mask.any()


def test_tokenize_known_and_unknown_words():
    vocab = build_vocab(["Nike shoe"])
    seq = tokenize("Nike shoe", vocab, 4)
    assert seq.ids.tolist() == [vocab["nike"], vocab["shoe"], PAD_ID, PAD_ID]
    assert seq.mask.tolist() == [True, True, False, False]
    assert tokenize("adidas", vocab, 2).ids[0] == UNK_ID


def test_tokenize_truncates():
    vocab = build_vocab(["a b c d e"])
    assert tokenize("a b c d e", vocab, 3).mask.all()


def test_passthrough_identity_projection():
    enc = VisualEncoder(EncoderConfig(mode="passthrough", embed_dim=4, input_dim=4), np.random.default_rng(0))
    enc.proj.assign(np.eye(4))
    rec = ImageRecord("a", 0, "train", features=(1.0, 0.0, 0.0, 0.0))
    tm = encode_image(rec, enc)
    assert tm.tokens.shape == (1, 4) and tm.tokens.data.tolist() == [[1, 0, 0, 0]]


def test_trainable_patch_count_and_determinism():
    cfg = EncoderConfig(mode="trainable", embed_dim=8, num_tokens=4, heads=2, patch_size=4)
    enc = VisualEncoder(cfg, np.random.default_rng(0))
    px = tuple(float(v) for v in np.linspace(0, 1, 64))
    a = encode_image(ImageRecord("a", 0, "train", pixels=(8, 8, px)), enc)
    b = encode_image(ImageRecord("b", 0, "train", pixels=(8, 8, px)), enc)
    assert a.tokens.shape == (4, 8)
    assert np.array_equal(a.tokens.data, b.tokens.data)


def test_patchify_rejects_indivisible_grid():
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 6, 8)), 4)


def test_record_mode_mismatch():
    enc = VisualEncoder(EncoderConfig(mode="passthrough", embed_dim=4, input_dim=4), np.random.default_rng(0))
    with pytest.raises(ValidationError):
        encode_image(ImageRecord("a", 0, "train", pixels=(2, 2, (0.0,) * 4)), enc)


def _text_encoder(vocab_size=10, n=6):
    cfg = EncoderConfig(embed_dim=8, num_tokens=n, heads=2, vocab_size=vocab_size)
    return TextEncoder(cfg, np.random.default_rng(3))


def test_text_all_pad_is_finite():
    enc = _text_encoder()
    out = encode_text(tokenize("", {}, 6), enc)
    assert np.isfinite(out.tokens.data).all()
    assert np.isfinite(pool(out).data).all()


def test_text_order_matters_and_determinism():
    enc = _text_encoder()
    vocab = build_vocab(["alpha beta gamma"])
    a = pool(encode_text(tokenize("alpha beta gamma", vocab, 6), enc)).data
    b = pool(encode_text(tokenize("gamma alpha beta", vocab, 6), enc)).data
    a2 = pool(encode_text(tokenize("alpha beta gamma", vocab, 6), enc)).data
    assert not np.allclose(a, b)
    assert np.array_equal(a, a2)


def test_text_id_out_of_range():
    enc = _text_encoder(vocab_size=5)
    with pytest.raises(DimensionError):
        enc.forward(np.array([[7, 1, 1, 1, 1, 1]]), np.ones((1, 6), dtype=bool))


def test_text_ops_are_attributed_to_text_scope():
    enc = _text_encoder()
    with T.OpCounter() as c:
        encode_text(tokenize("", {}, 6), enc)
    assert c["text"] > 0 and c["text"] == c["total"]


def test_pool_examples():
    assert np.allclose(pool(TokenMatrix(Tensor([[3.0, 4.0]]))).data, [0.6, 0.8], atol=1e-15)
    assert np.allclose(pool(TokenMatrix(Tensor([[3.0, 4.0], [3.0, 4.0]]))).data, [0.6, 0.8], atol=1e-15)
    with pytest.raises(DegenerateInputError):
        pool(TokenMatrix(Tensor([[1.0, 2.0], [-1.0, -2.0]])))


def test_pool_respects_mask():
    tm = TokenMatrix(Tensor([[3.0, 4.0], [-100.0, 7.0]]), np.array([True, False]))
    assert np.allclose(pool(tm).data, [0.6, 0.8], atol=1e-15)


def test_encoder_gradients():
    enc = _text_encoder()
    ids = np.array([[2, 3, 4, 1, 1, 1]])
    mask = ids != PAD_ID
    r = np.random.default_rng(0)
    w = Tensor(r.standard_normal(8))

    def f(table):
        enc.embed = table
        return T.sum(pool(enc.forward(ids, mask)) * w)

    assert T.finite_diff_check(f, Tensor(enc.embed.data)) < 1e-4
