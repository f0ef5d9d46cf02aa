"""Corpus handling: word-level vocabulary, batching, synthetic task generation.

Everything here is a pure function of its inputs and seeds; reruns are
byte-identical, which the experiment manifests rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]


@dataclass
class Vocab:
    """Frozen word-level vocabulary with fixed reserved ids."""

    tokens: list[str]               # full id-ordered list, reserved included
    index: dict[str, int] = field(default_factory=dict)
    coverage: dict[str, float] = field(default_factory=dict)  # corpus name -> OOV rate
    frozen: bool = True

    def __post_init__(self):
        if self.tokens[:4] != RESERVED:
            raise ConfigError(f"vocab must start with reserved tokens {RESERVED}")
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocab tokens are not unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens, ensure_ascii=False), "utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(json.loads(Path(path).read_text("utf-8")))


@dataclass
class ParallelCorpus:
    """Aligned (source, target) sentence pairs for one split of one task."""

    pairs: list[tuple[str, str]]
    name: str = "corpus"
    split: str = "train"

    def __post_init__(self):
        for s, t in self.pairs:
            if not s.strip() or not t.strip():
                raise ConfigError(f"empty line in corpus {self.name}/{self.split}")

    def __len__(self) -> int:
        return len(self.pairs)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        src = "\n".join(s for s, _ in self.pairs) + "\n"
        tgt = "\n".join(t for _, t in self.pairs) + "\n"
        (directory / f"{self.split}.src").write_text(src, "utf-8", newline="\n")
        (directory / f"{self.split}.tgt").write_text(tgt, "utf-8", newline="\n")

    @classmethod
    def load(cls, directory, split: str, name: str | None = None) -> "ParallelCorpus":
        directory = Path(directory)
        src = (directory / f"{split}.src").read_text("utf-8").splitlines()
        tgt = (directory / f"{split}.tgt").read_text("utf-8").splitlines()
        if len(src) != len(tgt):
            raise ConfigError(
                f"unaligned corpus {directory}: {len(src)} src vs {len(tgt)} tgt lines")
        return cls(list(zip(src, tgt)), name=name or directory.name, split=split)


def build_vocab(corpora: Sequence[ParallelCorpus], max_size: int) -> Vocab:
    """Frequency-capped vocabulary over all source and target text.

    Ordering is frequency descending, ties broken lexicographically, so the
    same corpora always produce the same file. Coverage (OOV rate per corpus)
    is recorded on the returned vocab.
    """
    if not corpora:
        raise ConfigError("build_vocab needs at least one corpus")
    if max_size < 1:
        raise ConfigError(f"max_size must be >= 1, got {max_size}")
    counts: dict[str, int] = {}
    for corpus in corpora:
        for s, t in corpus.pairs:
            for tok in s.split() + t.split():
                counts[tok] = counts.get(tok, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = RESERVED + [tok for tok, _ in ordered[:max_size]]
    vocab = Vocab(tokens)
    for corpus in corpora:
        total = oov = 0
        for s, t in corpus.pairs:
            for tok in s.split() + t.split():
                total += 1
                oov += tok not in vocab.index
        vocab.coverage[f"{corpus.name}/{corpus.split}"] = oov / total if total else 0.0
    return vocab


def encode(v: Vocab, text: str, framed: bool = True) -> list[int]:
    """Tokens to ids; unknown tokens map to unk. Targets are bos...eos framed."""
    ids = [v.index.get(tok, UNK) for tok in text.split()]
    return [BOS] + ids + [EOS] if framed else ids


def decode(v: Vocab, ids: Iterable[int]) -> str:
    """Ids back to text, dropping pad/bos/eos framing."""
    words = []
    for i in ids:
        if i in (PAD, BOS):
            continue
        if i == EOS:
            break
        words.append(v.tokens[i] if 0 <= i < len(v.tokens) else RESERVED[UNK])
    return " ".join(words)


@dataclass
class Batch:
    src: np.ndarray  # [B, S] int64, unframed, pad-filled
    tgt: np.ndarray  # [B, T] int64, bos...eos framed, pad-filled


def batch_iter(corpus: ParallelCorpus, v: Vocab, batch_size: int, max_len: int,
               shuffle_seed: int | None = None) -> Iterator[Batch]:
    """Padded batches in a deterministic, optionally shuffled order.

    Sentences longer than max_len are truncated; target truncation keeps the
    trailing eos.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(corpus))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        srcs, tgts = [], []
        for i in chunk:
            s, t = corpus.pairs[i]
            src = encode(v, s, framed=False)[:max_len]
            tgt = encode(v, t, framed=True)
            if len(tgt) > max_len:
                tgt = tgt[:max_len - 1] + [EOS]
            srcs.append(src)
            tgts.append(tgt)
        yield Batch(_pad(srcs), _pad(tgts))


def _pad(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


@dataclass
class SyntheticTaskSpec:
    """Deterministic generator spec for one synthetic translation task.

    kind:
      copy            - target equals source.
      cipher-language - target is a fixed token-permutation of the source; the
                        permutation plays the role of a language pair, and
                        `cipher_support` tunes difficulty (fraction of the
                        alphabet actually permuted; 0 means identity).
      style-suffix    - target equals source plus a style marker token; sources
                        are identical across tasks that share (seed, sizes).
    """

    kind: str = "copy"
    vocab_size: int = 50
    len_range: tuple[int, int] = (3, 10)
    sizes: dict[str, int] = field(default_factory=lambda: {
        "train": 1000, "valid": 100, "test": 100})
    seed: int = 0
    cipher_seed: int = 0
    cipher_support: float = 1.0
    style_marker: str = "<sty>"
    marker_pos: str = "suffix"  # or "prefix"
    name: str = "task"
    # half-open alphabet slice sentences draw from; None means the whole
    # alphabet. Two tasks on disjoint slices share zero content words, so
    # neither task's corpus carries evidence about the other's mapping.
    token_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("copy", "cipher-language", "style-suffix"):
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        lo, hi = self.len_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad len_range {self.len_range}")
        if self.marker_pos not in ("suffix", "prefix"):
            raise ConfigError(f"marker_pos must be suffix|prefix, got {self.marker_pos}")
        if not 0.0 <= self.cipher_support <= 1.0:
            raise ConfigError("cipher_support must lie in [0, 1]")
        if self.token_range is not None:
            a, b = self.token_range
            if not (0 <= a < b <= self.vocab_size):
                raise ConfigError(f"bad token_range {self.token_range} "
                                  f"for vocab_size {self.vocab_size}")

    @classmethod
    def from_json(cls, path) -> "SyntheticTaskSpec":
        raw = json.loads(Path(path).read_text("utf-8"))
        raw.pop("version", None)
        if "len_range" in raw:
            raw["len_range"] = tuple(raw["len_range"])
        if raw.get("token_range") is not None:
            raw["token_range"] = tuple(raw["token_range"])
        return cls(**raw)


def _alphabet(n: int) -> list[str]:
    return [f"w{i:03d}" for i in range(n)]


def _active_words(spec: SyntheticTaskSpec) -> list[str]:
    words = _alphabet(spec.vocab_size)
    if spec.token_range is None:
        return words
    a, b = spec.token_range
    return words[a:b]


def _cipher_map(spec: SyntheticTaskSpec) -> dict[str, str]:
    """Permutation over a seeded subset of the active alphabet, identity
    elsewhere."""
    words = _active_words(spec)
    k = int(round(spec.cipher_support * len(words)))
    if k < 2:
        return {}
    rng = np.random.default_rng(spec.cipher_seed)
    chosen = rng.choice(len(words), size=k, replace=False)
    shifted = np.roll(chosen, 1)  # single cycle: no fixed points inside support
    return {words[a]: words[b] for a, b in zip(chosen, shifted)}


def gen_synthetic(spec: SyntheticTaskSpec) -> dict[str, ParallelCorpus]:
    """Generate disjoint train/valid/test corpora from a task spec, byte-stably.

    Source sentences depend only on (seed, vocab_size, token_range, len_range,
    sizes), so two style tasks differing in their marker share identical
    sources.
    """
    rng = np.random.default_rng(spec.seed)
    words = _active_words(spec)
    total = sum(spec.sizes.values())
    seen: set[str] = set()
    sentences: list[str] = []
    lo, hi = spec.len_range
    attempts = 0
    while len(sentences) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise ConfigError(
                f"cannot generate {total} distinct sentences from "
                f"vocab {spec.vocab_size}, lengths {spec.len_range}")
        n = int(rng.integers(lo, hi + 1))
        s = " ".join(words[w] for w in rng.integers(0, len(words), size=n))
        if s not in seen:
            seen.add(s)
            sentences.append(s)

    if spec.kind == "cipher-language":
        mapping = _cipher_map(spec)
        transform = lambda s: " ".join(mapping.get(w, w) for w in s.split())
    elif spec.kind == "style-suffix":
        if spec.marker_pos == "suffix":
            transform = lambda s: f"{s} {spec.style_marker}"
        else:
            transform = lambda s: f"{spec.style_marker} {s}"
    else:
        transform = lambda s: s

    out: dict[str, ParallelCorpus] = {}
    at = 0
    for split in ("train", "valid", "test"):
        n = spec.sizes.get(split, 0)
        chunk = sentences[at:at + n]
        at += n
        out[split] = ParallelCorpus([(s, transform(s)) for s in chunk],
                                    name=spec.name, split=split)
    return out


def write_task(spec: SyntheticTaskSpec, directory) -> dict[str, ParallelCorpus]:
    """Generate and write a task directory (<split>.src/.tgt plus the task spec)."""
    directory = Path(directory)
    corpora = gen_synthetic(spec)
    for corpus in corpora.values():
        corpus.save(directory)
    payload = {k: (list(v) if isinstance(v, tuple) else v)
               for k, v in vars(spec).items()}
    (directory / "spec.json").write_text(json.dumps(payload, indent=2), "utf-8")
    return corpora
