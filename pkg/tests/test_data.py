import json

import numpy as np
import pytest

from attention_bench.data import (
    BOS_ID,
    PAD_ID,
    Batcher,
    CorpusStats,
    TokenBatch,
    batcher,
    load_documents,
    parse_messages_jsonl,
    render_messages,
    sample_corpus_path,
    synth_corpus,
    tokenize_bytes,
)
from attention_bench.exceptions import ConfigError, DataError


def write_jsonl(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_tokenize_short_text_is_padded():
    assert tokenize_bytes("hi", 4).tolist() == [BOS_ID, 104, 105, PAD_ID]
    assert tokenize_bytes("", 3).tolist() == [BOS_ID, PAD_ID, PAD_ID]


def test_tokenize_long_text_is_truncated():
    text = bytes(range(200)) * 3
    ids = tokenize_bytes(text, 512)
    assert ids.shape == (512,)
    assert ids[-1] == text[510]


def test_tokenize_multibyte_characters_use_their_utf8_bytes():
    assert tokenize_bytes("é", 3).tolist() == [BOS_ID, 0xC3, 0xA9]


def test_tokenize_rejects_empty_rows():
    with pytest.raises(ConfigError):
        tokenize_bytes("abc", 0)


def test_targets_are_shifted_and_padded():
    batch = TokenBatch(ids=np.array([[BOS_ID, 1, 2]]), lengths=np.array([3]))
    assert batch.targets().tolist() == [[1, 2, PAD_ID]]


def test_render_messages_format():
    messages = [{"role": "user", "content": "a"}, {"role": "assistant", "content": "b"}]
    assert render_messages(messages) == "user: a\nassistant: b\n"


def test_parse_messages_skips_and_counts_malformed_lines(tmp_path):
    path = write_jsonl(
        tmp_path / "chat.jsonl",
        [
            json.dumps({"messages": [{"role": "user", "content": "a"}]}),
            "{not json",
            json.dumps({"messages": [{"role": "assistant", "content": "b"}]}),
        ],
    )
    stats = CorpusStats()
    documents = list(parse_messages_jsonl(path, stats))
    assert documents == ["user: a\n", "assistant: b\n"]
    assert stats.malformed_lines == 1
    assert stats.documents == 2
    assert stats.bytes_read == path.stat().st_size


def test_empty_transcripts_are_counted_and_dropped_by_the_batcher(tmp_path):
    lines = [json.dumps({"messages": []})] + [
        json.dumps({"messages": [{"role": "user", "content": f"line {i}"}]}) for i in range(4)
    ]
    stats = CorpusStats()
    documents = list(parse_messages_jsonl(write_jsonl(tmp_path / "chat.jsonl", lines), stats))
    assert documents[0] == ""
    assert stats.empty_documents == 1
    loader = Batcher(documents, batch_size=2, seq_len=8, seed=0, stats=stats)
    assert stats.dropped_rows == 1
    assert len(loader) == 2


def test_missing_corpus_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        parse_messages_jsonl(tmp_path / "absent.jsonl")


def test_bundled_sample_corpus_parses_cleanly():
    stats = CorpusStats()
    documents = load_documents("sample", stats=stats)
    assert len(documents) == 200
    assert stats.malformed_lines == 0
    assert sample_corpus_path().is_file()


def test_synth_corpus_is_seeded_and_sized():
    first = list(synth_corpus(7, 100))
    assert len(first) == 100
    assert first[0] == next(iter(synth_corpus(7, 1)))
    assert first[0] != next(iter(synth_corpus(8, 1)))
    assert all(200 <= len(doc) <= 600 for doc in first)


def test_synth_corpus_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        synth_corpus(0, 0)
    with pytest.raises(ConfigError):
        synth_corpus(0, 5, (10, 5))


def test_batcher_counts_full_batches_and_is_deterministic():
    documents = list(synth_corpus(1, 32))
    loader = Batcher(documents, batch_size=16, seq_len=32, seed=4)
    assert loader.full_batches == 2
    first = [batch.ids for batch in loader.epoch(0)]
    again = [batch.ids for batch in Batcher(documents, 16, 32, seed=4).epoch(0)]
    assert len(first) == 2
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a, b)
    other_epoch = [batch.ids for batch in loader.epoch(1)]
    assert not all(np.array_equal(a, b) for a, b in zip(first, other_epoch))


def test_batcher_accounts_tokens_per_epoch():
    stats = CorpusStats()
    loader = Batcher(list(synth_corpus(2, 40)), 8, 16, seed=0, batches_per_epoch=7, stats=stats)
    batches = list(loader.epoch(0))
    assert len(batches) == 7
    assert stats.batches == 7
    assert stats.tokens == 7 * 8 * 16
    assert all(batch.ids.shape == (8, 16) for batch in batches)


def test_batcher_needs_one_full_batch():
    with pytest.raises(DataError):
        Batcher(["a", "b"], batch_size=4, seq_len=8, seed=0)


def test_batcher_function_yields_one_epoch():
    batches = list(batcher(list(synth_corpus(3, 10)), batch_size=5, seq_len=8, seed=0))
    assert len(batches) == 2
    assert all(isinstance(batch, TokenBatch) for batch in batches)
