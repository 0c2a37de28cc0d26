"""Tokenization, vocabulary construction and truncated-BPTT batching."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

EOS = "<eos>"
UNK = "<unk>"


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Whitespace tokens; every newline becomes an end-of-sentence token."""
    out: list[str] = []
    lines = text.split("\n")
    for i, line in enumerate(lines):
        out.extend(line.split())
        if i < len(lines) - 1:
            out.append(EOS)
    return out


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    counts: tuple[int, ...]
    unk_index: int = 1
    eos_index: int = 0
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        if self.tokens[self.eos_index] != EOS or self.tokens[self.unk_index] != UNK:
            raise CorpusError("vocabulary must carry <eos> and <unk>")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, self.unk_index)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        get, unk = self._index.get, self.unk_index
        return np.array([get(t, unk) for t in tokens], dtype=np.int64)

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in indices]

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for tok in self.tokens:
            h.update(tok.encode("utf-8") + b"\n")
        return h.hexdigest()[:16]

    def most_frequent(self) -> int:
        """Highest-count token other than <unk>; ties go to the lower index."""
        best = -1
        for i, c in enumerate(self.counts):
            if i == self.unk_index:
                continue
            if best < 0 or c > self.counts[best]:
                best = i
        return best

    def save(self, path) -> None:
        lines = [f"{t}\t{c}" for t, c in zip(self.tokens, self.counts)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected <token>\\t<count>")
            tokens.append(parts[0])
            counts.append(int(parts[1]))
        return cls(tuple(tokens), tuple(counts), tokens.index(UNK), tokens.index(EOS))


def build_vocab(text: str | Sequence[str], min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Index 0 is <eos>, 1 is <unk>, then real tokens by descending count.

    Ties keep first-occurrence order.  Tokens under ``min_count`` or past
    ``max_size`` fold into <unk>'s count.
    """
    toks = tokenize(text) if isinstance(text, str) else list(text)
    if not toks:
        raise CorpusError("empty token stream")
    counts = Counter(toks)
    first = {}
    for i, t in enumerate(toks):
        first.setdefault(t, i)
    real = [t for t in counts if t not in (EOS, UNK)]
    real.sort(key=lambda t: (-counts[t], first[t]))
    kept = [t for t in real if counts[t] >= min_count]
    if max_size is not None:
        kept = kept[:max_size]
    kept_set = set(kept)
    unk_count = counts.get(UNK, 0) + sum(counts[t] for t in real if t not in kept_set)
    return Vocabulary((EOS, UNK, *kept), (counts.get(EOS, 0), unk_count, *(counts[t] for t in kept)))


@dataclass(frozen=True)
class BpttBatch:
    inputs: np.ndarray
    targets: np.ndarray

    @property
    def length(self) -> int:
        return self.inputs.shape[1]


def segments(stream: Sequence[int], batch_size: int) -> np.ndarray:
    stream = np.asarray(stream, dtype=np.int64)
    if batch_size < 1 or len(stream) < 2 * batch_size:
        raise CorpusError(f"stream of {len(stream)} tokens too short for batch size {batch_size}")
    seg = len(stream) // batch_size
    return stream[: seg * batch_size].reshape(batch_size, seg)


def batchify(stream: Sequence[int], batch_size: int, bptt_len: int) -> list[BpttBatch]:
    """Split into ``batch_size`` contiguous lanes and cut windows of ``bptt_len``."""
    if bptt_len < 1:
        raise CorpusError("bptt_len must be >= 1")
    lanes = segments(stream, batch_size)
    usable = lanes.shape[1] - 1
    out = []
    for start in range(0, usable, bptt_len):
        stop = min(start + bptt_len, usable)
        out.append(BpttBatch(lanes[:, start:stop], lanes[:, start + 1:stop + 1]))
    return out


def read_corpus(path) -> str:
    return Path(path).read_text(encoding="utf-8")


# bundled synthetic corpora

DATA_DIR = Path(__file__).parent / "data"

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gr", "kl", "pl", "st", "tr", "sh", "ch", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_CODAS = ["", "", "n", "r", "l", "s", "m", "k", "t"]


def _lexicon(rng: np.random.Generator, size: int, taken: set[str], suffix: str = "") -> list[str]:
    words = []
    while len(words) < size:
        n_syl = int(rng.integers(1, 4))
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
                    for _ in range(n_syl)) + suffix
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _zipf(n: int, s: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** s
    return w / w.sum()


def synthetic_corpus(n_tokens: int, seed: int = 0, lexicon_size: int = 2200,
                     n_topics: int = 16) -> str:
    """Topic-coherent template sentences over a pseudo-word lexicon.

    Sentences are built from a handful of part-of-speech templates; content
    words come from a topic that persists across neighbouring sentences, so
    co-occurrence statistics carry both syntactic and topical structure.
    """
    rng = np.random.default_rng(seed)
    taken: set[str] = set()
    det = ["the", "a", "this", "that", "every", "some", "no", "its"]
    prep = ["of", "in", "on", "with", "under", "near", "from", "to", "by", "over"]
    conj = ["and", "but", "while", "because", "so"]
    pron = ["he", "she", "it", "they", "we", "you", "i"]
    taken.update(det + prep + conj + pron)
    n_content = lexicon_size - len(det) - len(prep) - len(conj) - len(pron)
    nouns = _lexicon(rng, int(n_content * 0.45), taken)
    verbs = _lexicon(rng, int(n_content * 0.25), taken, "s")
    adjs = _lexicon(rng, int(n_content * 0.2), taken, "y")
    advs = _lexicon(rng, n_content - len(nouns) - len(verbs) - len(adjs), taken, "ly")

    def topical(words):
        # each topic owns a disjoint slice plus shared frequent words
        shared = max(len(words) // 20, 1)
        rest = words[shared:]
        per = len(rest) // n_topics
        return [(words[:shared], rest[k * per:(k + 1) * per]) for k in range(n_topics)]

    classes = {"N": topical(nouns), "V": topical(verbs), "A": topical(adjs), "R": topical(advs)}
    closed = {"D": det, "P": prep, "C": conj, "O": pron}
    templates = [
        "D N V D N", "D A N V D N", "O V D A N", "D N V P D N", "D N R V D N",
        "O R V D N P D A N", "D A N V C O V D N", "D N P D N V", "O V D N C D N V R",
        "D N V D A N P D N",
    ]
    tmpl_p = _zipf(len(templates), 0.8)
    out: list[str] = []
    topic = int(rng.integers(n_topics))
    count = 0
    while count < n_tokens:
        if rng.random() < 0.3:
            topic = int(rng.integers(n_topics))
        words = []
        for slot in templates[rng.choice(len(templates), p=tmpl_p)].split():
            if slot in closed:
                pool = closed[slot]
                words.append(pool[rng.choice(len(pool), p=_zipf(len(pool)))])
                continue
            shared, own = classes[slot][topic]
            pool = shared if rng.random() < 0.25 else own
            words.append(pool[rng.choice(len(pool), p=_zipf(len(pool)))])
        out.append(" ".join(words))
        count += len(words) + 1
    return "\n".join(out) + "\n"


def write_bundled_corpora(directory=DATA_DIR) -> None:
    """Regenerate the bundled train/valid/test files (deterministic)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    text = synthetic_corpus(40_000, seed=7).split("\n")[:-1]
    n = len(text)
    cut1, cut2 = int(n * 0.8), int(n * 0.9)
    for name, lines in (("train", text[:cut1]), ("valid", text[cut1:cut2]), ("test", text[cut2:])):
        (directory / f"synth.{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    toy = synthetic_corpus(1_300, seed=3, lexicon_size=120, n_topics=3).split("\n")[:-1]
    k = int(len(toy) * 0.77)
    (directory / "toy.train.txt").write_text("\n".join(toy[:k]) + "\n", encoding="utf-8")
    (directory / "toy.valid.txt").write_text("\n".join(toy[k:]) + "\n", encoding="utf-8")


def bundled(name: str) -> Path:
    path = DATA_DIR / name
    if not path.exists():
        raise CorpusError(f"no bundled corpus {name!r}")
    return path


def iter_windows(batches: Sequence[BpttBatch]) -> Iterator[BpttBatch]:
    yield from batches
