"""Token streams: byte tokenizer, chat-transcript JSONL ingestion, synthetic corpus, batcher."""

import json
import logging
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from attention_bench.exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259

SAMPLE_CORPUS = "sample_messages.jsonl"


@dataclass
class CorpusStats:
    """Running counters of what the data pipeline consumed and produced."""

    documents: int = 0
    bytes_read: int = 0
    tokens: int = 0
    batches: int = 0
    malformed_lines: int = 0
    empty_documents: int = 0
    dropped_rows: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenBatch:
    """A ``(batch, seq)`` matrix of token ids padded with ``pad_id``.

    ``lengths[i]`` is the number of non-pad ids in row ``i``; padding only ever
    follows them.
    """

    ids: np.ndarray
    lengths: np.ndarray
    pad_id: int = PAD_ID

    @property
    def batch_size(self) -> int:
        return int(self.ids.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.ids.shape[1])

    @property
    def num_tokens(self) -> int:
        return int(self.ids.size)

    def targets(self) -> np.ndarray:
        """Next-token targets: ``ids`` shifted left by one, the last column set to pad."""
        return next_token_targets(self.ids, self.pad_id)


def next_token_targets(ids: np.ndarray, pad_id: int = PAD_ID) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    targets = np.full_like(ids, pad_id)
    targets[..., :-1] = ids[..., 1:]
    return targets


def tokenize_bytes(text: Union[str, bytes], max_len: int) -> np.ndarray:
    """Map UTF-8 bytes to ids 0..255 behind a BOS id, truncated or padded to ``max_len``.

    Args:
        text (Union[str, bytes]): Document text.
        max_len (int): Exact length of the returned row.

    Raises:
        ConfigError: If ``max_len`` is smaller than 1.

    Returns:
        np.ndarray: ``int64`` ids of length ``max_len``.

    Examples:
        >>> tokenize_bytes("hi", 4).tolist()
        [257, 104, 105, 256]
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be at least 1, got {max_len}.")
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[0] = BOS_ID
    body = np.frombuffer(raw[: max_len - 1], dtype=np.uint8)
    ids[1 : 1 + body.size] = body
    return ids


def render_messages(messages: Sequence[dict]) -> str:
    """Render a chat transcript as ``role: content`` lines."""
    return "".join(f"{message['role']}: {message['content']}\n" for message in messages)


def _parse_line(raw: bytes) -> str:
    record = json.loads(raw.decode("utf-8"))
    messages = record["messages"]
    if not isinstance(messages, list):
        raise TypeError("messages is not a list")
    for message in messages:
        if not isinstance(message.get("role"), str) or not isinstance(message.get("content"), str):
            raise TypeError("message without string role/content")
    return render_messages(messages)


def _iter_documents(handle, path: Path, stats: CorpusStats) -> Iterator[str]:
    try:
        for line_number, raw in enumerate(handle, start=1):
            stats.bytes_read += len(raw)
            if not raw.strip():
                continue
            try:
                document = _parse_line(raw)
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                stats.malformed_lines += 1
                logger.warning("Skipping malformed line %d of %s: %s", line_number, path, exc)
                continue
            stats.documents += 1
            if not document:
                stats.empty_documents += 1
            yield document
    finally:
        handle.close()


def parse_messages_jsonl(
    path: Union[str, Path], stats: Optional[CorpusStats] = None
) -> Iterator[str]:
    """Documents of a JSONL file whose lines hold a ``messages`` list of ``{role, content}``.

    Malformed lines are skipped and counted in ``stats.malformed_lines``; every
    raw byte read is added to ``stats.bytes_read``.

    Args:
        path (Union[str, Path]): The JSONL file.
        stats (Optional[CorpusStats], optional): Counters to update. Defaults to a fresh one.

    Raises:
        DataError: If the file cannot be opened.

    Returns:
        Iterator[str]: One rendered document per well-formed line.
    """
    path = Path(path)
    stats = stats if stats is not None else CorpusStats()
    try:
        handle = open(path, "rb")
    except OSError as exc:
        raise DataError(f"Cannot read corpus {path}: {exc}") from exc
    return _iter_documents(handle, path, stats)


def sample_corpus_path() -> Path:
    """Location of the bundled 200-line sample transcript file."""
    return Path(str(resources.files("attention_bench") / "resources" / SAMPLE_CORPUS))


_CONSONANTS = "bcdfghklmnprstvz"
_VOWELS = "aeiou"
_ROLES = ("user", "assistant")


def _lexicon(rng: np.random.Generator, size: int) -> List[str]:
    words = set()
    while len(words) < size:
        syllables = rng.integers(1, 4)
        words.add(
            "".join(
                _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                for _ in range(syllables)
            )
        )
    return sorted(words)


def synth_corpus(
    seed: int, n_docs: int, doc_len_range: Tuple[int, int] = (200, 600)
) -> Iterator[str]:
    """Seeded pseudo chat transcripts built from a small set of recurring phrases.

    Each document is a sequence of ``role: sentence`` lines; sentences are drawn
    from a fixed phrase book, so the n-gram structure repeats across the corpus
    and is learnable by a small model.

    Args:
        seed (int): Determines the whole corpus.
        n_docs (int): Number of documents to yield.
        doc_len_range (Tuple[int, int], optional): Inclusive range of document
            lengths in characters. Defaults to (200, 600).

    Raises:
        ConfigError: If ``n_docs`` is smaller than 1 or the range is invalid.
    """
    if n_docs < 1:
        raise ConfigError(f"n_docs must be at least 1, got {n_docs}.")
    low, high = doc_len_range
    if not 1 <= low <= high:
        raise ConfigError(f"Invalid document length range {doc_len_range}.")
    return _synth_documents(seed, n_docs, low, high)


def _synth_documents(seed: int, n_docs: int, low: int, high: int) -> Iterator[str]:
    rng = np.random.default_rng(seed)
    words = _lexicon(rng, 48)
    phrases = [
        " ".join(words[i] for i in rng.integers(len(words), size=rng.integers(3, 7)))
        for _ in range(16)
    ]
    for _ in range(n_docs):
        target = int(rng.integers(low, high + 1))
        lines = []
        length = 0
        turn = 0
        while length < target:
            sentence = " ".join(phrases[i] for i in rng.integers(len(phrases), size=2))
            line = f"{_ROLES[turn % 2]}: {sentence}.\n"
            lines.append(line)
            length += len(line)
            turn += 1
        yield "".join(lines)[:target]


class Batcher:
    """Deterministic epochs of fixed-shape token batches.

    Documents are tokenized once; rows holding nothing but BOS and padding are
    dropped. Each epoch walks seeded permutations of the rows, starting a new
    permutation whenever one runs out of full batches, until
    ``batches_per_epoch`` batches were produced.

    Args:
        documents (Iterable[str]): Source documents.
        batch_size (int): Rows per batch.
        seq_len (int): Ids per row.
        seed (int): Shuffling seed.
        batches_per_epoch (Optional[int], optional): Batches per epoch. Defaults
            to the number of full batches in one pass over the rows.
        stats (Optional[CorpusStats], optional): Counters to update.

    Raises:
        ConfigError: If a size is smaller than 1.
        DataError: If the corpus cannot fill a single batch.
    """

    def __init__(
        self,
        documents: Iterable[str],
        batch_size: int,
        seq_len: int,
        seed: int,
        batches_per_epoch: Optional[int] = None,
        stats: Optional[CorpusStats] = None,
    ):
        if batch_size < 1 or seq_len < 1:
            raise ConfigError(
                f"batch_size and seq_len must be at least 1, got {batch_size} and {seq_len}."
            )
        if batches_per_epoch is not None and batches_per_epoch < 1:
            raise ConfigError(f"batches_per_epoch must be at least 1, got {batches_per_epoch}.")
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.seed = seed
        self.stats = stats if stats is not None else CorpusStats()

        rows = []
        for document in documents:
            row = tokenize_bytes(document, seq_len)
            if seq_len < 2 or row[1] == PAD_ID:
                self.stats.dropped_rows += 1
                continue
            rows.append(row)
        self.full_batches = len(rows) // batch_size
        if self.full_batches == 0:
            raise DataError(
                f"The corpus holds {len(rows)} usable rows, fewer than one batch of {batch_size}."
            )
        self.rows = np.stack(rows)
        self.batches_per_epoch = batches_per_epoch or self.full_batches
        logger.debug(
            "Batcher ready: %d rows, %d batches per epoch", len(rows), self.batches_per_epoch
        )

    def __len__(self) -> int:
        return self.batches_per_epoch

    def __iter__(self) -> Iterator[TokenBatch]:
        return self.epoch(0)

    def epoch(self, index: int) -> Iterator[TokenBatch]:
        """Batches of epoch ``index``; the same index always yields the same batches."""
        rng = np.random.default_rng([self.seed, index])
        produced = 0
        while produced < self.batches_per_epoch:
            order = rng.permutation(len(self.rows))
            for start in range(0, self.full_batches * self.batch_size, self.batch_size):
                if produced == self.batches_per_epoch:
                    break
                ids = self.rows[order[start : start + self.batch_size]]
                lengths = (ids != PAD_ID).sum(axis=1)
                self.stats.tokens += int(ids.size)
                self.stats.batches += 1
                produced += 1
                yield TokenBatch(ids=ids, lengths=lengths)


def batcher(
    documents: Iterable[str],
    batch_size: int,
    seq_len: int,
    seed: int,
    batches_per_epoch: Optional[int] = None,
    stats: Optional[CorpusStats] = None,
) -> Iterator[TokenBatch]:
    """One epoch of batches; see :class:`Batcher`."""
    return iter(Batcher(documents, batch_size, seq_len, seed, batches_per_epoch, stats))


def load_documents(
    source: str, seed: int = 0, stats: Optional[CorpusStats] = None, n_docs: int = 1024
) -> List[str]:
    """Resolve a data source name to documents.

    Args:
        source (str): ``"synth"`` for the synthetic corpus, ``"sample"`` for the
            bundled transcripts, otherwise a JSONL path.
        seed (int, optional): Seed of the synthetic corpus. Defaults to 0.
        stats (Optional[CorpusStats], optional): Counters to update.
        n_docs (int, optional): Size of the synthetic corpus. Defaults to 1024.

    Returns:
        List[str]: Documents in source order.
    """
    stats = stats if stats is not None else CorpusStats()
    if source == "synth":
        documents = list(synth_corpus(seed, n_docs))
        stats.documents += len(documents)
        return documents
    path = sample_corpus_path() if source == "sample" else Path(source)
    return list(parse_messages_jsonl(path, stats))
