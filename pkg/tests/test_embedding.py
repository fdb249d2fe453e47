"""Vocabulary, input composition, embedding sums, vectors, synonyms."""
import math

import numpy as np
import pytest

from lexfuse.autodiff import Tensor
from lexfuse.embedding import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    UNK_ID,
    EmbeddingTable,
    VectorFormatError,
    Vocab,
    build_vocab,
    compose_input,
    embed,
    load_embedding_table,
    nearest_synonyms,
)
from lexfuse.lexicon import KeywordSet


class TestVocab:
    def test_min_freq_filters(self):
        v = build_vocab([["a", "b"], ["b", "c"]], min_freq=2)
        assert v.id("b") == 4
        assert v.id("a") == UNK_ID
        assert len(v) == 5

    def test_single_token(self):
        v = build_vocab([["x"]], min_freq=1)
        assert v.id("x") == 4

    def test_deterministic_assignment(self):
        seqs = [["m", "z", "a"], ["z", "a"], ["a"]]
        v1 = build_vocab(seqs)
        v2 = build_vocab(seqs)
        assert v1.id_to_word == v2.id_to_word
        # frequency desc, then lexicographic
        assert v1.id("a") == 4 and v1.id("z") == 5 and v1.id("m") == 6

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([])

    def test_reserved_ids(self):
        v = build_vocab([["w"]])
        assert v.id("[PAD]") == PAD_ID == 0
        assert v.id("[UNK]") == UNK_ID == 1
        assert v.id("[CLS]") == CLS_ID == 2
        assert v.id("[SEP]") == SEP_ID == 3

    def test_export(self, tmp_path):
        v = build_vocab([["w"]])
        out = tmp_path / "vocab.tsv"
        v.export(out)
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "[PAD]\t0"
        assert lines[4] == "w\t4"


class TestComposeInput:
    def vocab(self):
        return build_vocab([["feel", "dizzy", "weak", "sick"]])

    def test_worked_example(self):
        v = self.vocab()
        inp = compose_input(["feel", "dizzy"], KeywordSet(["dizzy"]), v, 8)
        d = v.id("dizzy")
        np.testing.assert_array_equal(
            inp.token_ids, [CLS_ID, v.id("feel"), d, SEP_ID, d, SEP_ID, PAD_ID, PAD_ID]
        )
        np.testing.assert_array_equal(inp.segment_ids, [0, 0, 0, 0, 1, 1, 0, 0])
        np.testing.assert_array_equal(inp.keyword_mask, [0, 0, 1, 0, 1, 0, 0, 0])
        np.testing.assert_array_equal(inp.attention_mask, [1, 1, 1, 1, 1, 1, 0, 0])
        np.testing.assert_array_equal(inp.position_ids, np.arange(8))

    def test_empty_keyword_set(self):
        v = self.vocab()
        inp = compose_input(["feel"], KeywordSet([]), v, 6)
        np.testing.assert_array_equal(
            inp.token_ids, [CLS_ID, v.id("feel"), SEP_ID, SEP_ID, PAD_ID, PAD_ID]
        )
        assert inp.keyword_mask.sum() == 0

    def test_no_keywords_single_segment(self):
        v = self.vocab()
        inp = compose_input(["feel", "dizzy"], None, v, 6)
        np.testing.assert_array_equal(
            inp.token_ids, [CLS_ID, v.id("feel"), v.id("dizzy"), SEP_ID, PAD_ID, PAD_ID]
        )
        assert inp.segment_ids.sum() == 0

    def test_truncates_s1_before_s2(self):
        v = self.vocab()
        s1 = ["feel"] * 100
        inp = compose_input(s1, KeywordSet(["dizzy", "weak", "sick"]), v, 16)
        ids = inp.token_ids
        # budget 13: S1 keeps 10, S2 keeps all 3
        assert (ids == SEP_ID).sum() == 2
        first_sep = int(np.argmax(ids == SEP_ID))
        assert first_sep == 11  # [CLS] + 10 tokens
        assert list(ids[12:15]) == [v.id("dizzy"), v.id("weak"), v.id("sick")]

    def test_s2_truncated_only_when_alone_too_long(self):
        v = self.vocab()
        inp = compose_input(["feel"] * 10, KeywordSet(["dizzy", "weak", "sick"]), v, 5)
        # budget 2: S1 drops to zero, S2 keeps 2
        np.testing.assert_array_equal(
            inp.token_ids, [CLS_ID, SEP_ID, v.id("dizzy"), v.id("weak"), SEP_ID]
        )

    def test_keyword_scope_s2_only(self):
        v = self.vocab()
        inp = compose_input(["dizzy"], KeywordSet(["dizzy"]), v, 8, keyword_scope="s2")
        np.testing.assert_array_equal(inp.keyword_mask, [0, 0, 0, 1, 0, 0, 0, 0])

    def test_max_len_too_small(self):
        with pytest.raises(ValueError):
            compose_input(["x"], KeywordSet([]), self.vocab(), 3)

    def test_invariants_on_random_inputs(self):
        """All five arrays share length T; padding is consistent; the
        separator/class-token counts match the composition form."""
        rng = np.random.default_rng(0)
        words = ["feel", "dizzy", "weak", "sick", "zonk"]
        v = build_vocab([words])
        for _ in range(300):
            max_len = int(rng.integers(4, 20))
            s1 = [words[i] for i in rng.integers(len(words), size=rng.integers(0, 25))]
            kws = [w for w in dict.fromkeys(s1) if rng.random() < 0.5]
            inp = compose_input(s1, KeywordSet(kws), v, max_len)
            n_real = int(inp.attention_mask.sum())
            for arr in (inp.token_ids, inp.segment_ids, inp.keyword_mask, inp.position_ids):
                assert arr.shape == (max_len,)
            assert (inp.token_ids[n_real:] == PAD_ID).all()
            assert (inp.attention_mask[n_real:] == 0).all()
            assert (inp.keyword_mask[n_real:] == 0).all()
            ids = inp.token_ids[:n_real]
            assert ids[0] == CLS_ID
            assert (ids == CLS_ID).sum() == 1
            assert (ids == SEP_ID).sum() == 2
            assert ids[-1] == SEP_ID
            # keyword mask only on keyword tokens
            kw_ids = {v.id(k) for k in kws}
            flagged = set(inp.token_ids[inp.keyword_mask == 1].tolist())
            assert flagged <= (kw_ids | {UNK_ID})


class TestEmbed:
    def make(self, seed, V=8, d=4, T=6):
        rng = np.random.default_rng(seed)
        tok = Tensor(rng.normal(size=(V, d)))
        seg = Tensor(rng.normal(size=(2, d)))
        pos = Tensor(rng.normal(size=(T, d)))
        v = build_vocab([["a", "b", "c"]])
        inp = compose_input(["a", "b", "c"], KeywordSet(["b"]), v, T)
        return inp, tok, seg, pos

    def test_zero_tables(self):
        inp, tok, seg, pos = self.make(0)
        z = Tensor(np.zeros_like(tok.data)), Tensor(np.zeros_like(seg.data)), Tensor(np.zeros_like(pos.data))
        np.testing.assert_array_equal(embed(inp, *z).data, np.zeros((6, 4)))

    def test_reduces_to_token_embedding(self):
        inp, tok, seg, pos = self.make(1)
        out = embed(inp, tok, Tensor(np.zeros_like(seg.data)), Tensor(np.zeros_like(pos.data)))
        np.testing.assert_array_equal(out.data, tok.data[inp.token_ids])

    def test_matches_explicit_sum(self):
        inp, tok, seg, pos = self.make(2)
        out = embed(inp, tok, seg, pos).data
        for i in range(6):
            expected = (
                tok.data[inp.token_ids[i]]
                + seg.data[inp.segment_ids[i]]
                + pos.data[i]
            )
            np.testing.assert_allclose(out[i], expected, atol=0)

    def test_linear_in_each_table(self):
        inp, tok, seg, pos = self.make(3)
        zero_tok = Tensor(np.zeros_like(tok.data))
        base = embed(inp, zero_tok, seg, pos).data
        one = embed(inp, tok, seg, pos).data
        two = embed(inp, Tensor(2.0 * tok.data), seg, pos).data
        np.testing.assert_allclose(two - base, 2.0 * (one - base), rtol=1e-12)


class TestEmbeddingTableIO:
    def test_parse_with_header(self, tmp_path):
        p = tmp_path / "v.txt"
        p.write_text("2 3\napple 1 0 0\npear 0 1 0\n", encoding="utf-8")
        t = load_embedding_table(p)
        assert len(t) == 2 and t.dim == 3
        np.testing.assert_array_equal(t.get("apple"), [1, 0, 0])

    def test_parse_without_header(self, tmp_path):
        p = tmp_path / "v.txt"
        p.write_text("apple 1 0\npear 0 1\n", encoding="utf-8")
        assert load_embedding_table(p).dim == 2

    def test_dimension_mismatch_reports_line(self, tmp_path):
        p = tmp_path / "v.txt"
        p.write_text("3 3\napple 1 0 0\npear 0 1\n", encoding="utf-8")
        with pytest.raises(VectorFormatError, match=":3"):
            load_embedding_table(p)

    def test_non_numeric_component(self, tmp_path):
        p = tmp_path / "v.txt"
        p.write_text("apple 1 zero\n", encoding="utf-8")
        with pytest.raises(VectorFormatError, match=":1"):
            load_embedding_table(p)

    def test_duplicate_first_wins(self, tmp_path, caplog):
        p = tmp_path / "v.txt"
        p.write_text("apple 1 0\napple 9 9\n", encoding="utf-8")
        with caplog.at_level("WARNING"):
            t = load_embedding_table(p)
        np.testing.assert_array_equal(t.get("apple"), [1, 0])
        assert "duplicate" in caplog.text

    def test_300_dimensional_table(self, tmp_path):
        rng = np.random.default_rng(0)
        p = tmp_path / "v300.txt"
        rows = [f"w{i} " + " ".join(f"{x:.5f}" for x in rng.normal(size=300)) for i in range(4)]
        p.write_text("4 300\n" + "\n".join(rows) + "\n", encoding="utf-8")
        assert load_embedding_table(p).dim == 300

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            EmbeddingTable(["a"], np.array([[np.nan, 1.0]]))

    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        t = EmbeddingTable(["a", "b"], rng.normal(size=(2, 5)))
        p = tmp_path / "rt.txt"
        t.save(p)
        back = load_embedding_table(p)
        np.testing.assert_array_equal(back.matrix, t.matrix)


class TestNearestSynonyms:
    def test_worked_example(self):
        t = EmbeddingTable(["good", "great", "bad"], np.array([[1, 0], [0.9, 0.1], [-1, 0.0]]))
        s = nearest_synonyms("good", t, 1)
        assert s.synonyms == ["great"]
        np.testing.assert_array_equal(s.vectors, [[0.9, 0.1]])

    def test_absent_keyword(self):
        t = EmbeddingTable(["a"], np.eye(1))
        s = nearest_synonyms("zzz", t, 3)
        assert s.synonyms == [] and s.h == 0

    def test_cap_by_table_size(self):
        t = EmbeddingTable(["a", "b", "c"], np.eye(3))
        assert len(nearest_synonyms("a", t, 5).synonyms) == 2

    def test_h_max_validated(self):
        t = EmbeddingTable(["a"], np.eye(1))
        with pytest.raises(ValueError):
            nearest_synonyms("a", t, 0)

    def test_ties_break_lexicographically(self):
        t = EmbeddingTable(["q", "zz", "aa"], np.array([[1.0, 0], [1.0, 0], [1.0, 0]]))
        assert nearest_synonyms("q", t, 2).synonyms == ["aa", "zz"]

    def test_matches_exhaustive_cosine_scan(self):
        """Agreement with a brute-force python-loop cosine ranking."""
        rng = np.random.default_rng(4)
        for trial in range(40):
            n, d = int(rng.integers(2, 30)), int(rng.integers(1, 6))
            words = [f"w{i:02d}" for i in range(n)]
            t = EmbeddingTable(words, rng.normal(size=(n, d)))
            kw = words[int(rng.integers(n))]
            h = int(rng.integers(1, 8))
            got = nearest_synonyms(kw, t, h).synonyms

            q = t.get(kw)
            scored = []
            for w in words:
                if w == kw:
                    continue
                v = t.get(w)
                nq = math.sqrt(float(q @ q))
                nv = math.sqrt(float(v @ v))
                cos = 0.0 if nq == 0 or nv == 0 else float(q @ v) / (nq * nv)
                scored.append((-cos, w))
            expected = [w for _, w in sorted(scored)[:h]]
            assert got == expected
