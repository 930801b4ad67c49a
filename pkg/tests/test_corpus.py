import json

import numpy as np
import pytest

from seqdiff import corpus
from seqdiff.corpus import (PairedExample, build_vocab, load_jsonl,
                            make_toy_dataset, pack, pack_batch, write_jsonl)


class TestBuildVocab:
    def test_contains_tokens_plus_reserved(self):
        v = build_vocab(["a b", "a"], min_freq=1)
        assert "a" in v.token_to_id and "b" in v.token_to_id
        assert v.id_to_token[0] == "[PAD]"
        assert v.size == len(corpus.RESERVED) + 2

    def test_min_freq_filters(self):
        v = build_vocab(["a b", "a"], min_freq=2)
        assert "b" not in v.token_to_id
        assert v.encode("b") == [v.unk_id]

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_round_trip(self):
        v = build_vocab(["the cat sat", "on the mat"])
        for s in ["the cat sat", "mat on cat"]:
            assert v.decode(v.encode(s)) == s


class TestLoadJsonl:
    def test_basic(self, tmp_path):
        v = build_vocab(["a b"])
        p = tmp_path / "d.jsonl"
        p.write_text('{"src": "a b", "trg": "b a"}\n')
        exs = load_jsonl(p, v)
        assert exs[0].src_ids == tuple(v.encode("a b"))
        assert exs[0].trg_ids == tuple(v.encode("b a"))

    def test_missing_field_names_line(self, tmp_path):
        v = build_vocab(["a"])
        p = tmp_path / "d.jsonl"
        p.write_text('{"src": "a", "trg": "a"}\n{"src": "a"}\n')
        with pytest.raises(ValueError, match=":2"):
            load_jsonl(p, v)

    def test_malformed_json_names_line(self, tmp_path):
        v = build_vocab(["a"])
        p = tmp_path / "d.jsonl"
        p.write_text('not json\n')
        with pytest.raises(ValueError, match=":1"):
            load_jsonl(p, v)

    def test_truncation_not_rejection(self, tmp_path):
        v = build_vocab(["a"])
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps({"src": "a " * 50, "trg": "a"}) + "\n")
        exs = load_jsonl(p, v, max_src_len=4)
        assert len(exs[0].src_ids) == 4


class TestToyDataset:
    def test_copy_identity(self):
        _, exs, _ = make_toy_dataset("copy", 10, (3, 5), 20, seed=0)
        assert all(e.src_ids == e.trg_ids for e in exs)

    def test_reverse(self):
        _, exs, _ = make_toy_dataset("reverse", 10, (3, 5), 20, seed=0)
        assert all(e.trg_ids == e.src_ids[::-1] for e in exs)

    def test_bijection_against_stored_permutation(self):
        vocab, exs, man = make_toy_dataset("bijection", 12, (3, 5), 50,
                                           seed=3)
        perm = {int(k): v for k, v in man["permutation"].items()}
        for e in exs:
            assert e.trg_ids == tuple(perm[i] for i in e.src_ids)
        # permutation is a bijection over word ids
        assert sorted(perm.keys()) == sorted(perm.values())

    def test_deterministic(self):
        a = make_toy_dataset("bijection", 12, (3, 5), 50, seed=9)
        b = make_toy_dataset("bijection", 12, (3, 5), 50, seed=9)
        assert a[1] == b[1] and a[2] == b[2]

    def test_preconditions(self):
        with pytest.raises(ValueError):
            make_toy_dataset("copy", 4, (3, 5), 10, seed=0)
        with pytest.raises(ValueError):
            make_toy_dataset("copy", 10, (3, 5), 0, seed=0)
        with pytest.raises(ValueError):
            make_toy_dataset("swap", 10, (3, 5), 10, seed=0)


class TestPack:
    def test_layout(self):
        v = corpus.make_toy_vocab(10)
        ex = PairedExample((5, 6), (7,))
        ids, cond, padm = pack(ex, v, 6)
        assert ids.tolist() == [5, 6, v.sep_id, 7, v.pad_id, v.pad_id]
        assert cond.tolist() == [True, True, True, False, False, False]
        assert padm.tolist() == [True, True, True, True, False, False]

    def test_exact_fit(self):
        v = corpus.make_toy_vocab(10)
        ids, cond, padm = pack(PairedExample((5, 6), (7,)), v, 4)
        assert padm.all()

    def test_too_small(self):
        v = corpus.make_toy_vocab(10)
        with pytest.raises(ValueError):
            pack(PairedExample((5, 6), (7,)), v, 3)

    def test_mask_partition(self):
        vocab, exs, _ = make_toy_dataset("copy", 10, (2, 4), 30, seed=1)
        batch = pack_batch(exs, vocab, 12)
        # condition positions are always real tokens
        assert not np.any(batch.condition_mask & ~batch.pad_mask)
        target = batch.pad_mask & ~batch.condition_mask
        assert np.array_equal(batch.target_mask, target)
        # condition positions precede target positions per row
        for cond, trg in zip(batch.condition_mask, target):
            if trg.any():
                assert cond.nonzero()[0].max() < trg.nonzero()[0].min()


def test_write_then_load_round_trip(tmp_path):
    vocab, exs, _ = make_toy_dataset("reverse", 10, (2, 4), 10, seed=5)
    p = tmp_path / "toy.jsonl"
    write_jsonl(p, exs, vocab)
    loaded = load_jsonl(p, vocab)
    assert loaded == exs


def test_empty_sides_rejected():
    with pytest.raises(ValueError):
        PairedExample((), (1,))
    with pytest.raises(ValueError):
        PairedExample((1,), ())
