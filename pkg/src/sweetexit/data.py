"""Datasets, whitespace tokenisation and a synthetic task with graded difficulty."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataFormatError
from .model import Batch
from .seeding import stream

UNK = "[UNK]"
CLS = "[CLS]"
UNK_ID = 0
CLS_ID = 1


class Vocab:
    """Token to id map; id 0 is unknown, id 1 is the leading [CLS] token."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: List[str] = [UNK, CLS]
        self.stoi = {UNK: UNK_ID, CLS: CLS_ID}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str, max_len: Optional[int] = None) -> np.ndarray:
        ids = [CLS_ID] + [self.stoi.get(t, UNK_ID) for t in text.split()]
        if max_len is not None:
            ids = ids[:max_len]
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.itos[i] for i in ids if i != CLS_ID)

    def to_json(self):
        return {"tokens": self.itos[2:]}

    @classmethod
    def from_json(cls, d):
        return cls(d["tokens"])


@dataclass
class Dataset:
    sequences: List[np.ndarray]
    labels: np.ndarray
    ids: np.ndarray
    n_classes: int
    split: str = "train"
    vocab: Optional[Vocab] = None
    label_names: Optional[List[str]] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.sequences) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ValueError("sequences, labels and ids must have equal length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    def max_token_id(self) -> int:
        return max((int(s.max()) for s in self.sequences if len(s)), default=0)

    def batch(self, index) -> Tuple[Batch, np.ndarray]:
        index = np.asarray(index, dtype=np.int64)
        return Batch.from_sequences([self.sequences[i] for i in index]), self.labels[index]

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.batch(np.arange(start, min(start + batch_size, len(self))))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return dataclasses.replace(
            self,
            sequences=[self.sequences[i] for i in index],
            labels=self.labels[index],
            ids=self.ids[index],
        )

    def fingerprint(self) -> bytes:
        """Byte serialisation used to compare datasets for exact equality."""
        parts = [self.labels.tobytes(), self.ids.tobytes()]
        parts += [np.asarray(s, dtype=np.int64).tobytes() + b"|" for s in self.sequences]
        return b"".join(parts)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTaskSpec:
    """A majority-of-cues classification task.

    Each class owns ``cues_per_class`` cue tokens; the rest of the vocabulary
    is noise. An instance's cue strength (drawn uniformly from
    ``cue_strength``) is the fraction of its body positions holding cue
    tokens, and its label is the class with the most cue tokens. The share of
    cues agreeing with the label is drawn from ``agreement`` (and kept above
    one half), so instances range from obvious to close calls.
    """

    n_classes: int = 2
    vocab_size: int = 512
    seq_len: int = 32
    cue_strength: Tuple[float, float] = (0.05, 0.5)
    agreement: Tuple[float, float] = (0.5, 1.0)
    cues_per_class: int = 8
    negation_rate: float = 0.0
    size: int = 2000
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if np.isscalar(self.cue_strength):
            self.cue_strength = (float(self.cue_strength), float(self.cue_strength))
        self.cue_strength = tuple(float(x) for x in self.cue_strength)
        self.agreement = tuple(float(x) for x in self.agreement)

    def validate(self):
        problems = []
        lo, hi = self.cue_strength
        if not 0.0 <= lo <= hi <= 1.0:
            problems.append(f"cue_strength range {self.cue_strength} not within [0, 1]")
        a_lo, a_hi = self.agreement
        if not 0.0 <= a_lo <= a_hi <= 1.0:
            problems.append(f"agreement range {self.agreement} not within [0, 1]")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if self.seq_len < 2:
            problems.append("seq_len must be >= 2")
        if self.size < 0:
            problems.append("size must be >= 0")
        if not 0.0 <= self.negation_rate <= 1.0:
            problems.append("negation_rate must be within [0, 1]")
        if self.not_token + 1 >= self.vocab_size:
            problems.append("vocab_size too small for the cue tokens plus at least one noise token")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["cue_strength"] = list(self.cue_strength)
        d["agreement"] = list(self.agreement)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError([f"unknown synthetic spec key {k!r}" for k in sorted(unknown)])
        return cls(**d)

    def cue_tokens(self, cls_index: int) -> np.ndarray:
        start = 2 + cls_index * self.cues_per_class
        return np.arange(start, start + self.cues_per_class)

    @property
    def not_token(self) -> int:
        return 2 + self.n_classes * self.cues_per_class

    def noise_range(self):
        return self.not_token + 1, self.vocab_size


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    spec.validate()
    rng = stream(spec.seed, "synthetic", spec.split)
    body = spec.seq_len - 1
    noise_lo, noise_hi = spec.noise_range()
    sequences, labels = [], []
    for _ in range(spec.size):
        strength = rng.uniform(*spec.cue_strength)
        n_cues = int(round(strength * body))
        label = int(rng.integers(spec.n_classes))
        units = []
        if n_cues:
            share = rng.uniform(*spec.agreement)
            n_agree = min(n_cues, max(n_cues // 2 + 1, int(round(share * n_cues))))
            owners = np.full(n_cues, label)
            others = [c for c in range(spec.n_classes) if c != label]
            owners[n_agree:] = rng.choice(others, size=n_cues - n_agree)
            negated = rng.random(n_cues) < spec.negation_rate
            for owner, neg in zip(owners, negated):
                if neg and sum(len(u) for u in units) + 2 <= body:
                    # a negated cue of class c-1 counts for class c
                    written = (owner - 1) % spec.n_classes
                    units.append([spec.not_token, int(rng.choice(spec.cue_tokens(written)))])
                else:
                    units.append([int(rng.choice(spec.cue_tokens(owner)))])
        used = sum(len(u) for u in units)
        units += [[int(t)] for t in rng.integers(noise_lo, noise_hi, size=max(0, body - used))]
        order = rng.permutation(len(units))
        tokens = [t for k in order for t in units[k]][:body]
        sequences.append(np.asarray([CLS_ID] + tokens, dtype=np.int64))
        labels.append(label)
    return Dataset(
        sequences=sequences,
        labels=np.asarray(labels),
        ids=np.arange(spec.size),
        n_classes=spec.n_classes,
        split=spec.split,
        label_names=[str(c) for c in range(spec.n_classes)],
    )


def cue_counts(dataset: Dataset, spec: SyntheticTaskSpec) -> np.ndarray:
    """(n, n_classes) cue tally per instance; a negated cue counts for the next class."""
    owner = {}
    for c in range(spec.n_classes):
        for t in spec.cue_tokens(c):
            owner[int(t)] = c
    out = np.zeros((len(dataset), spec.n_classes))
    for k, seq in enumerate(dataset.sequences):
        prev = None
        for t in seq.tolist():
            if t in owner:
                c = owner[t]
                if prev == spec.not_token:
                    c = (c + 1) % spec.n_classes
                out[k, c] += 1
            prev = t
    return out


def to_text_rows(dataset: Dataset):
    """Whitespace text per instance: vocabulary strings if known, else ``w<id>``."""
    for seq, label in zip(dataset.sequences, dataset.labels):
        name = dataset.label_names[label] if dataset.label_names else str(label)
        if dataset.vocab is not None:
            yield dataset.vocab.decode(seq[1:]), name
        else:
            yield " ".join(f"w{t}" for t in seq[1:]), name


def write_jsonl(path, dataset: Dataset):
    with open(path, "w") as fh:
        for text, label in to_text_rows(dataset):
            fh.write(json.dumps({"text": text, "label": label}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# file ingestion


def read_rows(path, fmt: str):
    """Yield ``(line_number, text, label)`` from a TSV or JSONL file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if fmt == "tsv":
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataFormatError(f"expected 'text<TAB>label', got {len(parts)} columns", lineno)
                text, label = parts
            elif fmt == "jsonl":
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"invalid JSON ({exc.msg})", lineno) from None
                if not isinstance(row, dict) or "text" not in row or "label" not in row:
                    raise DataFormatError("JSON row needs 'text' and 'label'", lineno)
                text, label = row["text"], row["label"]
            else:
                raise ValueError(f"unknown format {fmt!r}")
            if not isinstance(text, str):
                raise DataFormatError("text must be a string", lineno)
            yield lineno, text, str(label)


def load_dataset(
    path,
    fmt: str = "jsonl",
    vocab: Optional[Vocab] = None,
    label_names: Optional[Sequence[str]] = None,
    max_seq_len: int = 32,
    split: str = "train",
) -> Dataset:
    """Read and tokenise a dataset file.

    Without ``vocab`` this is the training split: the vocabulary (minimum
    frequency 1, in order of first appearance) and the label set (sorted
    label strings) are built from it. Other splits must pass both, and an
    unseen label string is an error.
    """
    rows = list(read_rows(path, fmt))
    build = vocab is None
    if build:
        vocab = Vocab()
        for _, text, _ in rows:
            for tok in text.split():
                vocab.add(tok)
    if label_names is None:
        if not build:
            raise ValueError("label_names are required when loading with an existing vocab")
        label_names = sorted({label for _, _, label in rows})
    label_index = {name: i for i, name in enumerate(label_names)}
    sequences, labels = [], []
    for lineno, text, label in rows:
        if label not in label_index:
            raise DataFormatError(f"unseen label {label!r}", lineno)
        sequences.append(vocab.encode(text, max_seq_len))
        labels.append(label_index[label])
    return Dataset(
        sequences=sequences,
        labels=np.asarray(labels, dtype=np.int64),
        ids=np.arange(len(rows)),
        n_classes=max(2, len(label_names)),
        split=split,
        vocab=vocab,
        label_names=list(label_names),
    )


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample of ``n`` instances without replacement (whole set if ``n >= len``).

    The draw depends only on ``seed`` and the dataset size, so every regime
    trained with the same seed sees the same subset.
    """
    if n >= len(dataset):
        return dataset
    index = np.sort(stream(seed, "subsample", len(dataset)).choice(len(dataset), size=n, replace=False))
    return dataset.subset(index)
