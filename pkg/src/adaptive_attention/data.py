"""SNLI-format loading, vocabulary, pretrained embeddings and padded batches."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, InputError

log = logging.getLogger(__name__)

LABELS = ("entailment", "contradiction", "neutral")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}
NO_GOLD_LABEL = "-"

PAD, OOV = "<pad>", "<oov>"
PAD_ID, OOV_ID = 0, 1
DEFAULT_VOCAB_SIZE = 40_000
MISSING_VECTOR_STD = 0.01

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and detach punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Example:
    premise_tokens: tuple[str, ...]
    hypothesis_tokens: tuple[str, ...]
    label: str

    def __post_init__(self):
        if not self.premise_tokens or not self.hypothesis_tokens:
            raise InputError("premise and hypothesis must both contain tokens")
        if self.label not in LABEL_INDEX:
            raise InputError(f"unknown label {self.label!r}")

    @classmethod
    def from_text(cls, premise: str, hypothesis: str, label: str = "entailment") -> "Example":
        return cls(tuple(tokenize(premise)), tuple(tokenize(hypothesis)), label)

    @property
    def label_id(self) -> int:
        return LABEL_INDEX[self.label]


def parse_snli_lines(lines: Iterable[str], source: str = "<lines>") -> list[Example]:
    examples = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            label = rec["gold_label"]
            premise, hypothesis = rec["sentence1"], rec["sentence2"]
        except (json.JSONDecodeError, KeyError, TypeError) as err:
            raise DataFormatError(f"{source}:{lineno}: malformed record ({err})") from err
        if label == NO_GOLD_LABEL:
            continue
        if label not in LABEL_INDEX:
            raise DataFormatError(f"{source}:{lineno}: unknown label {label!r}")
        try:
            examples.append(Example(tuple(tokenize(premise)), tuple(tokenize(hypothesis)), label))
        except InputError as err:
            raise DataFormatError(f"{source}:{lineno}: {err}") from err
    return examples


def load_snli(path: str | Path) -> list[Example]:
    """Read one-JSON-object-per-line SNLI records, dropping no-gold-label rows."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_snli_lines(fh, source=str(path))


def write_snli(examples: Iterable[Example], path: str | Path):
    """Write examples back out in the SNLI jsonl layout (tokens space-joined)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {
                "gold_label": ex.label,
                "sentence1": " ".join(ex.premise_tokens),
                "sentence2": " ".join(ex.hypothesis_tokens),
            }
            fh.write(json.dumps(rec) + "\n")


class Vocabulary:
    """Token/index map with ``<pad>`` at 0 and ``<oov>`` at 1."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [PAD, OOV]:
            raise DataFormatError("vocabulary must start with <pad>, <oov>")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataFormatError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str):
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, OOV_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, OOV_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids if i != PAD_ID]

    def save(self, path: str | Path):
        with Path(path).open("w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.itos):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        pairs = []
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, sep, idx = line.rpartition("\t")
                if not sep or not idx.isdigit():
                    raise DataFormatError(f"{path}:{lineno}: expected 'token<TAB>index'")
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DataFormatError(f"{path}: indices are not contiguous from 0")
        return cls([t for _, t in pairs])


def build_vocab(train_examples: Sequence[Example], max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Keep the ``max_size`` most frequent training tokens.

    Ties are broken by first occurrence (premise before hypothesis within an
    example).
    """
    if not train_examples:
        raise InputError("cannot build a vocabulary from an empty training set")
    counts: Counter[str] = Counter()
    for ex in train_examples:
        counts.update(ex.premise_tokens)
        counts.update(ex.hypothesis_tokens)
    counts.pop(PAD, None)
    counts.pop(OOV, None)
    # Counter preserves insertion order and sorted() is stable
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])[:max_size]
    return Vocabulary([PAD, OOV] + [tok for tok, _ in ranked])


def load_embeddings(
    path: str | Path | None,
    vocab: Vocabulary,
    raw_dim: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Embedding matrix ``[len(vocab), raw_dim]`` from a GloVe-style text file.

    Rows for tokens missing from the file are drawn from N(0, 0.01^2); the
    padding row is zero. Vectors are used as-is (no normalisation). With
    ``path=None`` every row is sampled, which needs ``raw_dim``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    found: dict[int, np.ndarray] = {}
    if path is not None:
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                tok, values = parts[0], parts[1:]
                if raw_dim is None:
                    raw_dim = len(values)
                elif len(values) != raw_dim:
                    raise DataFormatError(
                        f"{path}:{lineno}: vector for {tok!r} has {len(values)} dims, expected {raw_dim}"
                    )
                idx = vocab.stoi.get(tok)
                if idx is not None and idx != PAD_ID and idx not in found:
                    found[idx] = np.array(values, dtype=np.float64)
    if raw_dim is None:
        raise InputError("raw_dim is required when no embedding file is given")
    matrix = rng.normal(0.0, MISSING_VECTOR_STD, size=(len(vocab), raw_dim))
    for idx, vec in found.items():
        matrix[idx] = vec
    matrix[PAD_ID] = 0.0
    log.info("embeddings: %d/%d tokens found in file", len(found), len(vocab) - 1)
    matrix.setflags(write=False)
    return matrix


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Batch:
    premise_ids: np.ndarray
    hypothesis_ids: np.ndarray
    premise_mask: np.ndarray
    hypothesis_mask: np.ndarray
    labels: np.ndarray
    examples: tuple[Example, ...] = field(default=(), repr=False)

    def __len__(self):
        return int(self.labels.shape[0])


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def make_batch(examples: Sequence[Example], vocab: Vocabulary) -> Batch:
    p_ids, p_mask = _pad([vocab.encode(ex.premise_tokens) for ex in examples])
    h_ids, h_mask = _pad([vocab.encode(ex.hypothesis_tokens) for ex in examples])
    labels = np.array([ex.label_id for ex in examples], dtype=np.int64)
    return Batch(
        _frozen(p_ids), _frozen(h_ids), _frozen(p_mask), _frozen(h_mask), _frozen(labels), tuple(examples)
    )


def make_batches(
    examples: Sequence[Example], vocab: Vocabulary, batch_size: int, shuffle_seed: int | None = None
) -> list[Batch]:
    """Split into batches padded to each batch's own maximum lengths.

    ``shuffle_seed=None`` keeps the input order. The final partial batch is kept.
    """
    if batch_size < 1:
        raise InputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(examples))
    return [
        make_batch([examples[i] for i in order[start : start + batch_size]], vocab)
        for start in range(0, len(examples), batch_size)
    ]
