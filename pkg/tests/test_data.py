# tests/test_data.py

import numpy as np
import pytest

from conftest import TINY_SYNTHETIC
from stotrans.engine.sampling import RngStream
from stotrans.errors import ConfigError, ContractError, DataError
from stotrans.services.experiment_service import RunConfig, build_splits
from stotrans.text.datasets import (
    LabeledDataset,
    TextRows,
    carve_validation,
    encode_texts,
    load_tsv,
    read_tsv,
    split,
    split_sizes,
    write_tsv,
)
from stotrans.text.synthetic import (
    SyntheticConfig,
    cue_frequency,
    majority_vote_oracle,
    split_synthetic,
    synthetic_id_ood,
)
from stotrans.text.tokenizer import PAD_ID, UNK_ID, Vocab, build_vocab, tokenize
from stotrans.utils import derive_seed


def _numbered_dataset(n=30):
    """One single-token example per id so every example is identifiable."""
    vocab = Vocab([f"w{i}" for i in range(n)], min_freq=1)
    sequences = [np.array([i + 2]) for i in range(n)]
    return LabeledDataset(sequences, np.arange(n) % 2, vocab)


class TestTokenizer:

    def test_lowercases_and_splits(self):
        assert tokenize("Hello, World! it's") == ["hello", "world", "it", "s"]

    def test_underscore_is_a_separator(self):
        assert tokenize("snake_case  words") == ["snake", "case", "words"]

    def test_empty(self):
        assert tokenize("") == []
        assert tokenize("?!") == []


class TestVocab:

    def test_reserved_ids(self):
        vocab = build_vocab(["good good movie"], min_freq=1)
        assert vocab.id_of("<pad>") == PAD_ID
        assert vocab.id_of("<unk>") == UNK_ID
        assert vocab.id_of("terrible") == UNK_ID

    def test_frequency_then_lexicographic_order(self):
        vocab = build_vocab(["b a", "a b c", "c d"], min_freq=1)
        assert vocab.tokens == ["a", "b", "c", "d"]

    def test_min_freq(self):
        vocab = build_vocab(["b a", "a b c", "d"], min_freq=2)
        assert vocab.tokens == ["a", "b"]

    def test_max_size(self):
        assert len(build_vocab(["a a a b b c"], min_freq=1, max_size=2).tokens) == 2

    def test_deterministic(self):
        corpus = ["the cat sat", "the dog sat", "a cat ran"]
        assert build_vocab(corpus, min_freq=1) == build_vocab(list(corpus), min_freq=1)

    def test_empty_corpus(self):
        with pytest.raises(DataError):
            build_vocab([])

    def test_duplicate_token(self):
        with pytest.raises(DataError):
            Vocab(["a", "a"])

    def test_json_round_trip(self, tmp_path):
        vocab = build_vocab(["great movie", "great plot"], min_freq=1)
        assert Vocab.from_json(vocab.to_json(tmp_path / "vocab.json")) == vocab

    def test_missing_or_empty_json(self, tmp_path):
        with pytest.raises(DataError):
            Vocab.from_json(tmp_path / "absent.json")
        empty = tmp_path / "empty.json"
        empty.write_text("", encoding="utf-8")
        with pytest.raises(DataError):
            Vocab.from_json(empty)


class TestTsv:

    def test_single_line(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\tgreat movie\n", encoding="utf-8")
        texts, labels, malformed = read_tsv(path)
        assert (texts, labels, malformed) == (["great movie"], [1], 0)

    def test_malformed_lines_are_counted(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\tgreat movie\n0 no tab here\nx\tbad label\n0\t\n0\tdull plot\n", encoding="utf-8")
        texts, labels, malformed = read_tsv(path)
        assert texts == ["great movie", "dull plot"]
        assert labels == [1, 0]
        assert malformed == 3

    def test_extra_tabs_stay_in_the_text(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\tgreat movie\n0\ta\tb\n", encoding="utf-8")
        texts, labels, _ = read_tsv(path)
        assert texts[1] == "a b"
        assert labels == [1, 0]

    def test_extra_tab_on_the_first_line(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("1\tgreat\tmovie\n0\tdull plot\n1\tfine acting\n", encoding="utf-8")
        texts, labels, malformed = read_tsv(path)
        assert texts == ["great movie", "dull plot", "fine acting"]
        assert labels == [1, 0, 1]
        assert malformed == 0

    def test_crlf_and_blank_lines(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_bytes(b"1\tgreat movie\r\n\r\n0\tdull plot\r\n")
        assert read_tsv(path) == (["great movie", "dull plot"], [1, 0], 0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_tsv(tmp_path / "absent.tsv")

    def test_nothing_parseable(self, tmp_path):
        path = tmp_path / "train.tsv"
        path.write_text("no tabs\nat all\n", encoding="utf-8")
        with pytest.raises(DataError):
            read_tsv(path)

    def test_write_then_load_keeps_every_row(self, tmp_path):
        rows = [(1, "a fine\tfilm"), (0, "a dull film"), (1, "fine acting")]
        dataset = load_tsv(write_tsv(tmp_path / "out" / "rows.tsv", rows), min_freq=1)
        assert len(dataset) == 3
        assert dataset.malformed_count == 0
        assert dataset.labels.tolist() == [1, 0, 1]

    def test_truncation_and_empty_text(self):
        vocab = build_vocab(["one two three"], min_freq=1)
        dataset = encode_texts(["one two three", "..."], [0, 1], vocab, max_seq_len=2)
        assert [len(s) for s in dataset.sequences] == [2, 1]
        assert dataset.sequences[1].tolist() == [UNK_ID]


class TestSplits:

    @pytest.mark.parametrize("n, expected", [(9078, (6354, 907, 1817)), (10, (7, 1, 2))])
    def test_split_sizes(self, n, expected):
        assert split_sizes(n, (0.7, 0.1, 0.2)) == expected

    def test_bad_fractions(self):
        with pytest.raises(ContractError):
            split_sizes(10, (0.8, 0.4))

    def test_same_seed_same_split(self):
        dataset = _numbered_dataset()
        a = split(dataset, (0.7, 0.1, 0.2), seed=3)
        b = split(dataset, (0.7, 0.1, 0.2), seed=3)
        for left, right in zip(a, b):
            assert [s.tolist() for s in left.sequences] == [s.tolist() for s in right.sequences]

    def test_disjoint_and_complete(self):
        parts = split(_numbered_dataset(), (0.7, 0.1, 0.2), seed=3)
        assert [len(p) for p in parts] == [21, 3, 6]
        assert [p.split for p in parts] == ["train", "valid", "test"]
        ids = [int(s[0]) for p in parts for s in p.sequences]
        assert sorted(ids) == list(range(2, 32))

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            split(_numbered_dataset().subset([]), (0.7, 0.1, 0.2))

    def test_carve_validation(self):
        train, valid = carve_validation(_numbered_dataset(), 0.1, seed=1)
        assert (len(train), len(valid)) == (27, 3)

    def test_batch_padding(self):
        dataset = encode_texts(["a b c", "a"], [0, 1], build_vocab(["a b c"], min_freq=1))
        batch = dataset.batch([0, 1])
        assert batch.token_ids[1].tolist()[1:] == [PAD_ID, PAD_ID]
        assert batch.pad_mask.tolist() == [[False, False, False], [False, True, True]]

    def test_text_rows_split_like_datasets(self):
        rows = TextRows([f"w{i}" for i in range(30)], [i % 2 for i in range(30)])
        parts = split(rows, (0.7, 0.1, 0.2), seed=3)
        assert [len(p) for p in parts] == [21, 3, 6]
        assert [p.split for p in parts] == ["train", "valid", "test"]
        encoded = split(_numbered_dataset(), (0.7, 0.1, 0.2), seed=3)
        for raw, ids in zip(parts, encoded):
            assert [int(t[1:]) + 2 for t in raw.texts] == [int(s[0]) for s in ids.sequences]


class TestTsvSplits:

    @staticmethod
    def _write_rows(path, n=30):
        """Label i on row i so every row is identifiable after encoding."""
        return write_tsv(path, [(i, f"w{i}") for i in range(n)])

    @staticmethod
    def _texts(dataset):
        return [" ".join(dataset.vocab.decode(s.tolist())) for s in dataset.sequences]

    def test_three_way_split_of_the_train_file(self, tmp_path):
        path = self._write_rows(tmp_path / "train.tsv")
        cfg = RunConfig.load(overrides={"data_source": "tsv", "train_path": str(path), "min_freq": "1", "seed": "5"})
        splits = build_splits(cfg)
        expected = split(TextRows(*read_tsv(path)[:2]), (0.7, 0.1), RngStream(derive_seed(5, "split")))
        assert [p.labels.tolist() for p in splits[:3]] == [p.labels for p in expected]
        assert self._texts(splits.train) == expected[0].texts

    def test_validation_carved_when_a_test_file_exists(self, tmp_path):
        path = self._write_rows(tmp_path / "train.tsv")
        test_path = write_tsv(tmp_path / "test.tsv", [(1, "w0 w1"), (0, "w2")])
        cfg = RunConfig.load(overrides={"data_source": "tsv", "train_path": str(path), "test_path": str(test_path),
                                        "min_freq": "1", "seed": "5"})
        splits = build_splits(cfg)
        assert (len(splits.train), len(splits.valid), len(splits.test)) == (27, 3, 2)
        train, valid = carve_validation(TextRows(*read_tsv(path)[:2]), 0.1, RngStream(derive_seed(5, "split")))
        assert self._texts(splits.train) == train.texts
        assert splits.valid.labels.tolist() == valid.labels

    def test_vocab_comes_from_the_train_portion(self, tmp_path):
        path = self._write_rows(tmp_path / "train.tsv")
        cfg = RunConfig.load(overrides={"data_source": "tsv", "train_path": str(path), "min_freq": "1"})
        splits = build_splits(cfg)
        assert set(splits.vocab.tokens) == set(self._texts(splits.train))


class TestSynthetic:

    def test_sizes(self):
        in_domain, out_of_domain = synthetic_id_ood(TINY_SYNTHETIC)
        assert len(in_domain) == 64 + 2 * 32
        assert len(out_of_domain) == 32
        assert all(len(s) == 8 for s in in_domain.sequences)

    def test_out_of_domain_cues_never_appear_in_domain(self):
        in_domain, out_of_domain = synthetic_id_ood(TINY_SYNTHETIC)
        ood_cues = in_domain.metadata["ood_cues"]
        assert cue_frequency(in_domain, ood_cues) == 0
        assert cue_frequency(out_of_domain, ood_cues) == 32 * TINY_SYNTHETIC.cues_per_example

    def test_majority_vote_is_perfect_on_both_domains(self):
        in_domain, out_of_domain = synthetic_id_ood(TINY_SYNTHETIC)
        for dataset in (in_domain, out_of_domain):
            np.testing.assert_array_equal(majority_vote_oracle(dataset), dataset.labels)

    def test_deterministic(self):
        a, _ = synthetic_id_ood(TINY_SYNTHETIC)
        b, _ = synthetic_id_ood(TINY_SYNTHETIC)
        assert [s.tolist() for s in a.sequences] == [s.tolist() for s in b.sequences]
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_split_sizes(self):
        in_domain, _ = synthetic_id_ood(TINY_SYNTHETIC)
        train, valid, test = split_synthetic(in_domain, TINY_SYNTHETIC)
        assert (len(train), len(valid), len(test)) == (64, 32, 32)

    def test_overlapping_cue_sets(self):
        config = SyntheticConfig(vocab_size=40, cue_sets=((0, 1), (1, 2), (3,), (4,)))
        with pytest.raises(ConfigError):
            synthetic_id_ood(config)

    def test_even_cue_count(self):
        with pytest.raises(ConfigError):
            synthetic_id_ood(SyntheticConfig(vocab_size=40, cues_per_example=4))

    def test_oracle_needs_cue_metadata(self):
        with pytest.raises(ContractError):
            majority_vote_oracle(_numbered_dataset())
