"""Corpora, vocabularies, batching and synthetic data generators."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "unk")


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def detokenize(tokens) -> str:
    return " ".join(tokens)


class Vocab:
    def __init__(self, tokens: list[str], min_freq: int = 1):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids, strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, SOS):
                continue
            out.append(self.itos[i])
        return out

    def normalize(self, line: str) -> str:
        """The line as the model sees it: lowercased, whitespace-joined, unk-substituted."""
        return detokenize(self.decode(self.encode(tokenize(line))))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        itos = Path(path).read_text(encoding="utf-8").split("\n")
        if itos and itos[-1] == "":
            itos.pop()
        if tuple(itos[:len(RESERVED)]) != RESERVED:
            raise ValueError(f"{path}: reserved tokens missing or reordered")
        return cls(itos[len(RESERVED):])


def build_vocab(lines, min_freq: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-ordered vocabulary (count desc, then lexicographic).

    ``max_size`` counts the four reserved entries.
    """
    lines = list(lines)
    if not lines:
        raise ValueError("build_vocab: empty corpus")
    if max_size is not None and max_size < len(RESERVED):
        raise ValueError(f"build_vocab: max_size {max_size} is smaller than the {len(RESERVED)} reserved ids")
    counts = Counter(t for line in lines for t in tokenize(line))
    for r in RESERVED:
        counts.pop(r, None)
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[:max_size - len(RESERVED)]
    return Vocab(kept, min_freq)


@dataclass
class LabeledCorpus:
    sentences: list[list[int]]
    labels: list[int] | None = None
    split: str = "train"

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.sentences):
            raise ValueError("label count does not match sentence count")

    def __len__(self) -> int:
        return len(self.sentences)

    def subset(self, idx) -> "LabeledCorpus":
        idx = list(idx)
        labels = None if self.labels is None else [self.labels[i] for i in idx]
        return LabeledCorpus([self.sentences[i] for i in idx], labels, self.split)

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else len(set(self.labels))


def sentence_hash(ids) -> str:
    return hashlib.sha1(" ".join(map(str, ids)).encode()).hexdigest()


# -- file IO ----------------------------------------------------------------------

def read_lines(path, labeled: bool = False):
    """Read one sentence per line; labeled files are ``<label>\\t<sentence>``."""
    texts, labels = [], []
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        if labeled:
            if "\t" not in raw:
                raise ValueError(f"{path}:{n}: expected '<label>\\t<sentence>'")
            lab, text = raw.split("\t", 1)
            labels.append(lab.strip())
            texts.append(text)
        else:
            texts.append(raw)
    return texts, (labels if labeled else None)


def write_lines(path, lines, labels=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, line in enumerate(lines):
            fh.write(f"{labels[i]}\t{line}\n" if labels is not None else f"{line}\n")


def encode_corpus(vocab: Vocab, texts, labels=None, split: str = "train", label_index=None) -> LabeledCorpus:
    sents = [vocab.encode(tokenize(t)) for t in texts]
    keep = [i for i, s in enumerate(sents) if s]
    ids = None
    if labels is not None:
        if label_index is None:
            label_index = {lab: i for i, lab in enumerate(sorted(set(labels), key=str))}
        ids = [label_index[labels[i]] for i in keep]
    return LabeledCorpus([sents[i] for i in keep], ids, split)


# -- synthetic text ----------------------------------------------------------------

_FUNCTION_WORDS = ("the", "a", "of", "in", "and", "to", "is", "was", "on", "with", "by", "for")


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    templates_per_class: int = 3
    pool_size: int = 8
    min_len: int = 6
    max_len: int = 10
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.templates_per_class < 1 or self.pool_size < 1:
            raise ValueError("synthetic spec: counts must be positive")
        if not 2 <= self.min_len <= self.max_len:
            raise ValueError(f"synthetic spec: need 2 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("synthetic spec: split sizes must be non-negative")

    @classmethod
    def from_mapping(cls, kv: dict) -> "SyntheticSpec":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ValueError(f"synthetic spec: unknown keys {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in kv.items()})


@dataclass
class SyntheticCorpus:
    train: list[str]
    dev: list[str]
    test: list[str]
    train_labels: list[int] = field(default_factory=list)
    dev_labels: list[int] = field(default_factory=list)
    test_labels: list[int] = field(default_factory=list)

    def split(self, name: str) -> tuple[list[str], list[int]]:
        return getattr(self, name), getattr(self, f"{name}_labels")


def generate_synthetic_text(spec: SyntheticSpec) -> SyntheticCorpus:
    """Class-conditional templated sentences with class-specific content words.

    Each class owns a disjoint pool of content words per slot, so the label is
    recoverable from any single content word. Splits are disjoint as sets of
    sentences.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    templates = []
    for k in range(spec.n_classes):
        per_class = []
        for t in range(spec.templates_per_class):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            n_slots = max(1, length // 2)
            slot_pos = set(rng.choice(length, size=n_slots, replace=False).tolist())
            template = []
            s = 0
            for pos in range(length):
                if pos in slot_pos:
                    template.append(("slot", s))
                    s += 1
                else:
                    template.append(("word", _FUNCTION_WORDS[int(rng.integers(len(_FUNCTION_WORDS)))]))
            per_class.append(template)
        templates.append(per_class)

    def draw(k: int) -> str:
        template = templates[k][int(rng.integers(len(templates[k])))]
        out = []
        for kind, val in template:
            if kind == "word":
                out.append(val)
            else:
                out.append(f"k{k}s{val}w{int(rng.integers(spec.pool_size))}")
        return " ".join(out)

    seen: set[str] = set()
    result = {}
    for name, n in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        texts, labels = [], []
        attempts = 0
        while len(texts) < n:
            attempts += 1
            if attempts > 50 * n + 1000:
                raise ValueError("synthetic spec: too few distinct sentences for the requested split sizes")
            k = int(rng.integers(spec.n_classes))
            line = draw(k)
            if line in seen:
                continue
            seen.add(line)
            texts.append(line)
            labels.append(k)
        result[name] = (texts, labels)
    return SyntheticCorpus(result["train"][0], result["dev"][0], result["test"][0],
                           result["train"][1], result["dev"][1], result["test"][1])


# -- synthetic vectors -------------------------------------------------------------

def generate_synthetic_vectors(n: int, dim: int = 64, classes: int = 4, noise: float = 0.1, seed=0,
                               prototypes: np.ndarray | None = None):
    """Binary class prototypes with independent bit flips.

    Returns ``(x, labels, prototypes)``; ``x`` has shape ``(n, dim)`` with 0/1 entries.
    """
    if not 0.0 <= noise < 0.5:
        raise ValueError(f"noise must lie in [0, 0.5), got {noise}")
    rng = np.random.default_rng(seed)
    if prototypes is None:
        prototypes = (rng.random((classes, dim)) < 0.5).astype(np.float64)
    labels = rng.integers(classes, size=n)
    flips = rng.random((n, dim)) < noise
    x = np.abs(prototypes[labels] - flips)
    return x, labels, prototypes


# -- batching ------------------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray        # (B, T) padded with PAD
    lengths: np.ndarray    # (B,)
    index: np.ndarray      # corpus positions of the rows


def pad_batch(sentences, index=None) -> Batch:
    lengths = np.array([len(s) for s in sentences], dtype=np.int64)
    T = int(lengths.max()) if len(lengths) else 0
    ids = np.full((len(sentences), T), PAD, dtype=np.int64)
    for r, s in enumerate(sentences):
        ids[r, :len(s)] = s
    if index is None:
        index = np.arange(len(sentences))
    return Batch(ids, lengths, np.asarray(index))


def batch_iter(corpus: LabeledCorpus, batch_size: int, shuffle: bool = False, seed=0, epoch: int = 0):
    """Yield padded batches; shuffling is a deterministic function of ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(corpus))
    if shuffle:
        order = np.random.default_rng([int(seed), int(epoch)]).permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield pad_batch([corpus.sentences[i] for i in idx], idx)
