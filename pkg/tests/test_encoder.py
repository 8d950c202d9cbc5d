import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkgc.encoder import (CheckpointError, EmptyTextError, EncoderConfig, ModelWeights, Tokenizer,
                            UnknownRelationError, ZeroNormError, encode_entity, encode_relation_aware,
                            fnv1a64, init_weights, load_weights, save_weights, tokenize)

TK = Tokenizer(num_buckets=16, max_tokens=12)


def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_tokenize_basics():
    assert tokenize(TK, "") == []
    assert tokenize(TK, "London") == tokenize(TK, "London")
    assert len(tokenize(TK, "London")) == 1
    assert tokenize(TK, "London") == tokenize(TK, "LONDON")
    words = " ".join(f"w{i}" for i in range(20))
    assert len(tokenize(TK, words)) == 12
    assert tokenize(TK, words) == tokenize(TK, " ".join(f"w{i}" for i in range(12)))
    assert tokenize(TK, "London") == [fnv1a64(b"london") & 15]


@given(st.text(max_size=60))
def test_token_ids_in_range(text):
    assert all(0 <= i < 16 for i in tokenize(TK, text))


def test_vocab_mode():
    tk = Tokenizer(mode="vocab", vocab=("a", "b"))
    assert tk.num_buckets == 3
    assert tokenize(tk, "a b zzz") == [1, 2, 0]


def test_tokenizer_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        Tokenizer(num_buckets=100)


def _weights(rows, prefix=None, key="r"):
    w = ModelWeights({"tok_emb": np.array(rows, dtype=float)})
    if prefix is not None:
        w[f"rel_prefix/{key}#fwd"] = np.array(prefix, dtype=float)
        w[f"rel_prefix/{key}#inv"] = np.array(prefix, dtype=float)
    return w


def _tk_for(words):
    # vocab tokenizer gives exact control over which row each word hits
    return Tokenizer(mode="vocab", vocab=tuple(words))


def test_single_token_is_normalized_row():
    tk = _tk_for(["london"])
    w = _weights([[0, 0], [3, 4]])
    np.testing.assert_allclose(encode_entity(w, tk, "london"), [0.6, 0.8], atol=1e-15)


def test_opposite_rows_error():
    tk = _tk_for(["x", "y"])
    w = _weights([[0, 0], [1, 2], [-1, -2]])
    with pytest.raises(ZeroNormError):
        encode_entity(w, tk, "x y")


def test_empty_text_error():
    with pytest.raises(EmptyTextError):
        encode_entity(_weights([[1, 0]]), _tk_for(["a"]), "   ")


def test_three_tokens_against_arithmetic():
    tk = _tk_for(["a", "b", "c"])
    rows = [[0, 0, 0], [1.0, 2.0, -1.0], [0.5, -3.0, 2.0], [4.0, 0.25, 1.0]]
    w = _weights(rows)
    s = [sum(rows[i][j] for i in (1, 2, 3)) / 3 for j in range(3)]
    n = sum(x * x for x in s) ** 0.5
    np.testing.assert_allclose(encode_entity(w, tk, "a b c"), [x / n for x in s], rtol=0, atol=1e-15)


def test_relation_aware_prefix_one_row():
    tk = _tk_for(["paris"])
    cfg = EncoderConfig(dim=2, prefix_len=1, vocab_size=2)
    p, v = [1.0, -2.0], [3.0, 5.0]
    w = _weights([[0, 0], v], prefix=[p], key="capital of")
    mean = [(p[0] + v[0]) / 2, (p[1] + v[1]) / 2]
    n = (mean[0] ** 2 + mean[1] ** 2) ** 0.5
    got = encode_relation_aware(w, tk, cfg, "paris", "capital of#fwd")
    np.testing.assert_allclose(got, [mean[0] / n, mean[1] / n], atol=1e-15)


def test_zero_prefix_preserves_direction():
    tk = _tk_for(["paris"])
    cfg = EncoderConfig(dim=2, prefix_len=3, vocab_size=2)
    w = _weights([[0, 0], [3.0, 4.0]], prefix=np.zeros((3, 2)))
    np.testing.assert_allclose(encode_relation_aware(w, tk, cfg, "paris", "r#fwd"), [0.6, 0.8], atol=1e-15)


def test_inverse_key_uses_inverse_prefix():
    tk = _tk_for(["paris"])
    cfg = EncoderConfig(dim=2, prefix_len=1, vocab_size=2)
    w = _weights([[0, 0], [1.0, 0.0]], prefix=[[0.0, 1.0]])
    w["rel_prefix/r#inv"] = np.array([[0.0, -1.0]])
    fwd = encode_relation_aware(w, tk, cfg, "paris", "r#fwd")
    inv = encode_relation_aware(w, tk, cfg, "paris", "r#inv")
    assert fwd[1] > 0 > inv[1]
    with pytest.raises(UnknownRelationError):
        encode_relation_aware(w, tk, cfg, "paris", "other#fwd")


def test_textual_equals_parameterized_when_prefix_is_relation_rows():
    cfg_p = EncoderConfig(dim=8, prefix_len=2, vocab_size=64)
    cfg_t = EncoderConfig(dim=8, prefix_len=2, vocab_size=64, relation_mode="textual")
    tk = cfg_p.tokenizer()
    w = init_weights(cfg_p, ["lives in"], 3)
    ids = tk.tokenize("lives in")
    w["rel_prefix/lives in#fwd"] = w["tok_emb"][ids].copy()
    a = encode_relation_aware(w, tk, cfg_p, "sherlock holmes", "lives in#fwd")
    b = encode_relation_aware(w, tk, cfg_t, "sherlock holmes", "lives in#fwd")
    np.testing.assert_array_equal(a, b)


def test_init_weights_determinism_and_shapes():
    cfg = EncoderConfig(dim=8, prefix_len=3, vocab_size=32)
    a = init_weights(cfg, ["r1", "r2", "r3"], 1)
    b = init_weights(cfg, ["r3", "r1", "r2"], 1)
    c = init_weights(cfg, ["r1", "r2", "r3"], 2)
    assert a.equal(b)
    assert not np.array_equal(a["tok_emb"], c["tok_emb"])
    assert len([n for n in a if n.startswith("rel_prefix/")]) == 6
    assert list(a) == sorted(a)
    assert a["tok_emb"].shape == (32, 8)
    assert a["rel_prefix/r2#inv"].shape == (3, 8)
    bound = 0.5 / np.sqrt(8)
    assert all(np.abs(a[n]).max() <= bound for n in a)
    # a tensor's values do not depend on which other relations exist
    d = init_weights(cfg, ["r1"], 1)
    np.testing.assert_array_equal(a["rel_prefix/r1#fwd"], d["rel_prefix/r1#fwd"])
    with pytest.raises(ValueError):
        init_weights(cfg, ["r1", "r1"], 1)


def test_textual_mode_has_no_prefix_tensors():
    w = init_weights(EncoderConfig(dim=4, vocab_size=16, relation_mode="textual"), ["r"], 0)
    assert list(w) == ["tok_emb"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["amber", "birch", "cedar", "delta", "ember", "fjord"]), min_size=1, max_size=8),
       st.randoms(use_true_random=False), st.integers(0, 2**32))
def test_unit_norm_and_order_invariance(words, rnd, seed):
    cfg = EncoderConfig(dim=6, prefix_len=2, vocab_size=16)
    tk = cfg.tokenizer()
    w = init_weights(cfg, ["r"], seed)
    text = " ".join(words)
    shuffled = list(words)
    rnd.shuffle(shuffled)
    e1 = encode_entity(w, tk, text)
    e2 = encode_entity(w, tk, " ".join(shuffled))
    assert abs(np.linalg.norm(e1) - 1) <= 1e-9
    np.testing.assert_allclose(e1, e2, atol=1e-12)
    q = encode_relation_aware(w, tk, cfg, text, "r#inv")
    assert abs(np.linalg.norm(q) - 1) <= 1e-9


def test_checkpoint_round_trip(tmp_path):
    cfg = EncoderConfig(dim=4, prefix_len=2, vocab_size=16)
    w = init_weights(cfg, ["a b", "c"], 7)
    path = tmp_path / "w.ckpt"
    save_weights(w, path)
    v = load_weights(path, cfg)
    assert v.equal(w)
    assert v.checksum() == w.checksum()
    raw = path.read_bytes()
    assert raw[:8] == b"FKGCKPT1"
    with pytest.raises(CheckpointError):
        load_weights(path, EncoderConfig(dim=4, prefix_len=3, vocab_size=16))
    with pytest.raises(CheckpointError):
        load_weights(path, EncoderConfig(dim=8, prefix_len=2, vocab_size=16))
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_weights(tmp_path / "bad.ckpt")


def test_checksum_sensitive_to_values():
    w = init_weights(EncoderConfig(dim=4, vocab_size=16), ["r"], 0)
    v = w.copy()
    v["tok_emb"][0, 0] += 1e-12
    assert w.checksum() != v.checksum()
    assert len(w.checksum()) == 16
