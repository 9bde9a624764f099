import numpy as np
import pytest

from vtlm.bpe import BpeCodec
from vtlm.data import load_triplets, write_triplets
from vtlm.errors import ConfigError, DataError
from vtlm.synthetic import (
    GenConfig,
    OBJECT_WORDS,
    generate_corpus,
    generate_raw,
    generate_synthetic,
    label_centers,
    nearest_center_labels,
    raw_sentences,
    to_second_language,
)

SMALL = GenConfig(num_examples=120, num_valid=30, num_test=30, num_merges=300,
                  feat_dim=16)


class TestGenerator:
    def test_seed_determinism(self):
        a = generate_synthetic(SMALL, seed=9)
        b = generate_synthetic(SMALL, seed=9)
        assert len(a) == len(b) == SMALL.num_examples
        for x, y in zip(a, b):
            assert x.id == y.id
            assert x.src_tokens == y.src_tokens
            assert x.tgt_tokens == y.tgt_tokens
            assert x.entity_spans == y.entity_spans
            assert all(rx == ry for rx, ry in zip(x.regions, y.regions))

    def test_sigma_zero_feats_equal_centers(self):
        cfg = GenConfig(num_examples=40, cluster_sigma=0.0, feat_dim=16)
        centers = label_centers(cfg, 3)
        raw = generate_raw(cfg, 3, centers)
        for ex in raw:
            for r in ex.regions:
                assert np.array_equal(r.feat, centers[r.label])

    def test_nearest_center_recovers_labels(self):
        # 10k regions, sigma=0.1, centres N(0,1) in D=64
        cfg = GenConfig(num_examples=1250, cluster_sigma=0.1, feat_dim=64)
        centers = label_centers(cfg, 5)
        raw = generate_raw(cfg, 5, centers)
        feats = np.stack([r.feat for ex in raw for r in ex.regions])
        labels = np.array([r.label for ex in raw for r in ex.regions])
        assert feats.shape[0] >= 10_000
        acc = np.mean(nearest_center_labels(feats, centers) == labels)
        assert acc > 0.99

    def test_last_word_grounded_in_slot0(self):
        """Slot-0 nearest-centre prediction recovers the final content word."""
        cfg = GenConfig(num_examples=400, feat_dim=32)
        centers = label_centers(cfg, 11)
        raw = generate_raw(cfg, 11, centers)
        hits = 0
        for ex in raw:
            pred = int(nearest_center_labels(ex.regions[0].feat[None, :], centers)[0])
            last_content = ex.src_words[-2]  # final "." is punctuation
            hits += OBJECT_WORDS[pred] == last_content
        assert hits / len(raw) > 0.95

    def test_second_language_mirrors_first(self):
        cfg = GenConfig(num_examples=50, feat_dim=8)
        raw = generate_raw(cfg, 7, label_centers(cfg, 7))
        for ex in raw:
            # same pair count, reversed order, bijectively mapped words
            src_objs = [ex.src_words[i] for i in ex.src_entity_words]
            tgt_objs = [ex.tgt_words[i] for i in ex.tgt_entity_words]
            assert tgt_objs == [to_second_language(w) for w in reversed(src_objs)]
            assert ex.tgt_words[-1] == "."

    def test_region_slot_convention(self):
        cfg = GenConfig(num_examples=80, feat_dim=8)
        raw = generate_raw(cfg, 13, label_centers(cfg, 13))
        for ex in raw:
            objs = [ex.src_words[i] for i in ex.src_entity_words]
            assert OBJECT_WORDS[ex.regions[0].label] == objs[-1]
            assert OBJECT_WORDS[ex.regions[1].label] == objs[0]
            for j in range(2, len(objs)):
                assert OBJECT_WORDS[ex.regions[j].label] == objs[j - 1]

    def test_too_few_regions_rejected(self):
        with pytest.raises(ConfigError):
            generate_synthetic(GenConfig(num_examples=5, num_regions=2), seed=1)

    def test_entity_spans_point_at_object_tokens(self):
        corpus = generate_corpus(SMALL, seed=21)
        codec = corpus.codec
        for ex in corpus.train[:50]:
            for span in ex.spans_for("src"):
                word = codec.decode(ex.src_tokens[span.start:span.end])
                assert word in OBJECT_WORDS


class TestCorpusSplits:
    def test_splits_disjoint_seeds_shared_codec(self):
        corpus = generate_corpus(SMALL, seed=4)
        assert len(corpus.train) == SMALL.num_examples
        assert len(corpus.valid) == SMALL.num_valid
        assert len(corpus.test) == SMALL.num_test
        # same codec across splits: no UNK anywhere
        for split in (corpus.train, corpus.valid, corpus.test):
            for ex in split:
                assert 4 not in ex.src_tokens and 4 not in ex.tgt_tokens

    def test_no_unk_on_learned_corpus(self):
        cfg = GenConfig(num_examples=60, feat_dim=8, num_merges=150)
        centers = label_centers(cfg, 2)
        raw = generate_raw(cfg, 2, centers)
        codec = BpeCodec.learn(raw_sentences(raw), cfg.num_merges)
        for s in raw_sentences(raw):
            assert 4 not in codec.encode(s)


class TestTripletIO:
    def test_write_load_roundtrip(self, tmp_path):
        examples = generate_synthetic(SMALL, seed=8)[:100]
        path = tmp_path / "triplets.jsonl"
        write_triplets(path, examples, SMALL.feat_dim, SMALL.num_regions,
                       SMALL.num_labels)
        loaded, header = load_triplets(path)
        assert header["D"] == SMALL.feat_dim and header["o"] == SMALL.num_regions
        assert len(loaded) == len(examples)
        for a, b in zip(examples, loaded):
            assert a.id == b.id
            assert a.src_tokens == b.src_tokens
            assert a.tgt_tokens == b.tgt_tokens
            assert a.entity_spans == b.entity_spans
            assert all(x == y for x, y in zip(a.regions, b.regions))

    def test_truncated_line_names_line_number(self, tmp_path):
        examples = generate_synthetic(SMALL, seed=8)[:3]
        path = tmp_path / "triplets.jsonl"
        write_triplets(path, examples, SMALL.feat_dim, SMALL.num_regions,
                       SMALL.num_labels)
        text = path.read_text()
        lines = text.splitlines()
        lines[-1] = lines[-1][: len(lines[-1]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="line 4"):
            load_triplets(path)

    def test_feat_dim_mismatch_is_schema_error(self, tmp_path):
        examples = generate_synthetic(SMALL, seed=8)[:3]
        path = tmp_path / "triplets.jsonl"
        write_triplets(path, examples, SMALL.feat_dim, SMALL.num_regions,
                       SMALL.num_labels)
        with pytest.raises(DataError, match="feature dim"):
            load_triplets(path, expect_feat_dim=SMALL.feat_dim + 1)

    def test_byte_identical_across_writes(self, tmp_path):
        examples = generate_synthetic(SMALL, seed=8)[:20]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (p1, p2):
            write_triplets(p, examples, SMALL.feat_dim, SMALL.num_regions,
                           SMALL.num_labels)
        assert p1.read_bytes() == p2.read_bytes()
