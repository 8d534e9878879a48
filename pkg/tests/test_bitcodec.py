import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitcap.bitcodec import PAD, BitCodec, Vocabulary, bits_per_word


def test_bits_per_word_values():
    assert bits_per_word(10199) == 14  # 10k-word captioning vocab fits in 14 bits
    assert bits_per_word(2) == 1
    assert bits_per_word(16) == 4
    assert bits_per_word(17) == 5


def test_bits_per_word_rejects_tiny_vocab():
    with pytest.raises(ValueError):
        bits_per_word(1)


def test_encode_word_three_of_four():
    codec = BitCodec(vocab_size=4, seq_len=1)
    col = codec.encode_sentence([3])[:, 0]
    assert np.array_equal(col, [1.0, 1.0])  # binary 11


def test_encode_empty_sentence_is_all_pad():
    codec = BitCodec(vocab_size=8, seq_len=5)
    x = codec.encode_sentence([])
    pad_col = codec.codes[PAD]
    assert x.shape == (3, 5)
    for j in range(5):
        assert np.array_equal(x[:, j], pad_col)


def test_encode_rejects_out_of_vocab_index():
    codec = BitCodec(vocab_size=8, seq_len=4)
    with pytest.raises(ValueError):
        codec.encode_sentence([7, 8])


def test_round_trip_all_small_vocabs():
    rng = np.random.default_rng(3)
    for w in range(2, 65):
        codec = BitCodec(vocab_size=w, seq_len=6)
        ids = rng.integers(0, w, size=6)
        assert np.array_equal(codec.quantize_decode(codec.encode_sentence(ids)), ids)


def test_decode_survives_positive_scaling_and_small_noise():
    rng = np.random.default_rng(5)
    codec = BitCodec(vocab_size=16, seq_len=8)
    ids = rng.integers(0, 16, size=8)
    x = codec.encode_sentence(ids)
    assert np.array_equal(codec.quantize_decode(0.9 * x), ids)
    noise = rng.uniform(-0.99, 0.99, size=x.shape)
    assert np.array_equal(codec.quantize_decode(x + noise), ids)


def test_unmatched_pattern_resolves_hamming_nearest_lowest_index():
    # W=3, n=2: codes are 0->(-,-), 1->(-,+), 2->(+,-).  Enumerating the four
    # sign patterns: (-,-)->0, (-,+)->1, (+,-)->2, and (+,+) is unowned with
    # distance 1 to both words 1 and 2, so the tie breaks to 1.
    codec = BitCodec(vocab_size=3, seq_len=1)
    patterns = {
        (-1.0, -1.0): 0,
        (-1.0, 1.0): 1,
        (1.0, -1.0): 2,
        (1.0, 1.0): 1,
    }
    for pat, want in patterns.items():
        x = np.array(pat).reshape(2, 1)
        assert codec.quantize_decode(x)[0] == want


def test_code_rows_distinct_and_in_scale():
    codec = BitCodec(vocab_size=37, seq_len=4, scale=0.5)
    rows = {tuple(r) for r in codec.codes}
    assert len(rows) == 37
    assert set(np.unique(codec.codes)) == {-0.5, 0.5}


def test_batch_encode_shape():
    codec = BitCodec(vocab_size=8, seq_len=5)
    x = codec.encode_batch([[1, 2], [3], []])
    assert x.shape == (3, 3, 5)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(min_value=2, max_value=64),
    st.integers(min_value=0, max_value=2**31 - 1),
    st.floats(min_value=0.05, max_value=10.0),
)
def test_decode_scale_invariance_property(vocab_size, seed, lam):
    rng = np.random.default_rng(seed)
    codec = BitCodec(vocab_size=vocab_size, seq_len=5)
    x = rng.normal(size=(codec.n_bits, 5))
    a = codec.quantize_decode(x)
    b = codec.quantize_decode(lam * x)
    assert np.array_equal(a, b)


def test_vocabulary_reserved_slots_and_round_trip(tmp_path):
    vocab = Vocabulary.build(["cat", "dog", "runs"], seq_len=6)
    assert vocab.index["<pad>"] == 0 and vocab.index["<unk>"] == 1
    assert vocab.encode_words(["dog", "flies"]) == [3, 1]
    assert vocab.decode_ids([3, 0, 2]) == ["dog", "cat"]
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    again = Vocabulary.load(path, seq_len=6)
    assert again.words == vocab.words
