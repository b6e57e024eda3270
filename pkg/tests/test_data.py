import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isovae.data import (EOS, PAD, SOS, UNK, LabeledCorpus, SyntheticSpec, Vocab, batch_iter, build_vocab,
                         detokenize, encode_corpus, generate_synthetic_text, generate_synthetic_vectors, pad_batch,
                         read_lines, sentence_hash, tokenize, write_lines)

words = st.lists(st.sampled_from(["the", "cat", "sat", "on", "mat", "Dog", "RAN"]), min_size=1, max_size=8)


def test_reserved_ids():
    v = build_vocab(["a b"])
    assert [v.itos[i] for i in (PAD, SOS, EOS, UNK)] == ["<pad>", "<sos>", "<eos>", "unk"]


def test_vocab_ordering_and_truncation():
    v = build_vocab(["b a a c", "c a"], max_size=6)
    assert v.itos[4:] == ["a", "c"]
    assert build_vocab(["x y"], min_freq=2).itos[4:] == []
    with pytest.raises(ValueError):
        build_vocab(["a"], max_size=3)
    with pytest.raises(ValueError):
        build_vocab([])


@given(st.lists(words, min_size=1, max_size=5))
def test_round_trip_up_to_unk(sents):
    lines = [" ".join(s) for s in sents]
    v = build_vocab(lines)
    for line in lines:
        assert detokenize(v.decode(v.encode(tokenize(line)))) == " ".join(line.lower().split())


def test_unknown_tokens_map_to_unk():
    v = build_vocab(["the cat"])
    assert v.normalize("The  dog") == "the unk"


def test_decode_stops_at_eos():
    v = build_vocab(["a b"])
    assert v.decode([SOS, 4, 5, EOS, 4]) == ["a", "b"]
    assert v.decode([4, PAD, 5]) == ["a", "b"]


def test_vocab_save_load(tmp_path):
    v = build_vocab(["z y y x"])
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt").itos == v.itos
    (tmp_path / "bad.txt").write_text("a\nb\n")
    with pytest.raises(ValueError):
        Vocab.load(tmp_path / "bad.txt")


def test_labeled_file_round_trip(tmp_path):
    write_lines(tmp_path / "c.tsv", ["hello world", "bye"], ["pos", "neg"])
    texts, labels = read_lines(tmp_path / "c.tsv", labeled=True)
    assert texts == ["hello world", "bye"] and labels == ["pos", "neg"]
    (tmp_path / "bad.tsv").write_text("no tab here\n")
    with pytest.raises(ValueError):
        read_lines(tmp_path / "bad.tsv", labeled=True)


def test_encode_corpus_drops_empty_and_indexes_labels():
    v = build_vocab(["a b"])
    c = encode_corpus(v, ["a", "   ", "b a"], ["y", "x", "x"])
    assert c.sentences == [[4], [5, 4]] and c.labels == [1, 0]
    with pytest.raises(ValueError):
        LabeledCorpus([[1]], [0, 1])


def test_synthetic_splits_disjoint_and_deterministic():
    spec = SyntheticSpec(n_train=300, n_dev=50, n_test=50, seed=4)
    a, b = generate_synthetic_text(spec), generate_synthetic_text(spec)
    assert a.train == b.train and a.test_labels == b.test_labels
    hashes = [{sentence_hash(s.split()) for s in getattr(a, n)} for n in ("train", "dev", "test")]
    assert not (hashes[0] & hashes[1] or hashes[0] & hashes[2] or hashes[1] & hashes[2])
    assert len(a.train) == 300 and set(a.train_labels) == {0, 1, 2, 3}
    assert all(spec.min_len <= len(s.split()) <= spec.max_len for s in a.train)


def test_synthetic_seed_changes_corpus():
    a = generate_synthetic_text(SyntheticSpec(n_train=50, n_dev=5, n_test=5, seed=0))
    b = generate_synthetic_text(SyntheticSpec(n_train=50, n_dev=5, n_test=5, seed=1))
    assert a.train != b.train


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec.from_mapping({"colour": "3"})
    with pytest.raises(ValueError):
        generate_synthetic_text(SyntheticSpec(min_len=1))
    assert SyntheticSpec.from_mapping({"n_train": "10"}).n_train == 10


def test_synthetic_vectors():
    x, y, protos = generate_synthetic_vectors(500, 16, 3, 0.1, seed=0)
    assert x.shape == (500, 16) and set(np.unique(x)) <= {0.0, 1.0}
    flips = np.mean(x != protos[y])
    assert 0.07 < flips < 0.13
    x2, _, _ = generate_synthetic_vectors(10, 16, 3, 0.1, seed=1, prototypes=protos)
    assert x2.shape == (10, 16)


def test_pad_batch():
    b = pad_batch([[4, 5, 6], [7]])
    np.testing.assert_array_equal(b.ids, [[4, 5, 6], [7, PAD, PAD]])
    np.testing.assert_array_equal(b.lengths, [3, 1])


def test_batch_iter_covers_everything_once():
    c = LabeledCorpus([[i + 4] for i in range(10)])
    seen = np.concatenate([b.index for b in batch_iter(c, 3, shuffle=True, seed=1, epoch=2)])
    assert sorted(seen.tolist()) == list(range(10))
    again = np.concatenate([b.index for b in batch_iter(c, 3, shuffle=True, seed=1, epoch=2)])
    np.testing.assert_array_equal(seen, again)
    with pytest.raises(ValueError):
        next(batch_iter(c, 0))
