"""Synthetic toy language pairs emulating translate-train / translate-test.

A "language" is a rendering of latent token sentences: the source language is
the identity rendering, the target language applies a fixed bijective cipher
over content tokens. Machine translation between them is simulated by the
cipher plus local adjacent swaps (word-order divergence) and random token
corruption (translation noise), so translated text is label-preserving for
classification but noisy at the token level.

Token id 0 is padding; ids 1..vocab_size-1 are content. A few low ids are
designated keyword tokens that carry the task signal:

* classification: the label is which keyword group is present (one or two
  occurrences of a single group per sentence, so translation noise can erase
  or fake the evidence and transfer is learnable but imperfect),
* structured: binary keyword/non-keyword tagging,
* span: a contiguous keyword run whose boundaries are the answer.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .losses import TaskKind

PAD_ID = 0
KEYWORDS_A = (1, 2, 3, 4)
KEYWORDS_B = (5, 6, 7, 8)
MIN_FILLER_ID = 9
DROPPED_TAG = -1  # alignment severed by token corruption

MIN_SENT_LEN = 6
MAX_SENT_LEN = 12


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ToyLanguageSpec:
    """Parameters of one toy language pair and its simulated translator."""

    vocab_size: int = 50
    swap_rate: float = 0.1
    noise_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < MIN_FILLER_ID + 4:
            raise CorpusError(f"vocab_size must be >= {MIN_FILLER_ID + 4}")
        for name in ("swap_rate", "noise_rate"):
            rate = getattr(self, name)
            if not (0.0 <= rate <= 1.0):
                raise CorpusError(f"{name} must lie in [0, 1]")

    def cipher(self) -> np.ndarray:
        """Bijection over content tokens (pad is fixed), derived from the seed."""
        rng = np.random.default_rng(self.seed)
        table = np.zeros(self.vocab_size, dtype=np.int64)
        table[1:] = 1 + rng.permutation(self.vocab_size - 1)
        return table

    def inverse_cipher(self) -> np.ndarray:
        table = self.cipher()
        inv = np.zeros_like(table)
        inv[table] = np.arange(self.vocab_size)
        return inv


@dataclass
class ParallelExample:
    """A source/target sentence pair with task label and provenance flags."""

    src_tokens: list[int]
    tgt_tokens: list[int]
    back_translated_src: list[int] | None
    label: object  # int for classification, dict of per-stream labels otherwise
    src_is_real: bool
    tgt_is_real: bool


@dataclass
class DatasetBundle:
    """Training pairs and test pairs realizing the five data collections.

    Each training example carries the real source sentence, its forward
    translation (the pseudo target training text), and the back-translation
    of that translation. Each test example carries the real target sentence
    and its translate-test source.
    """

    task: TaskKind | None
    train: list[ParallelExample] = field(default_factory=list)
    test: list[ParallelExample] = field(default_factory=list)

    def num_classes(self) -> int:
        if self.task == TaskKind.CLASSIFICATION:
            labels = [ex.label for ex in self.train + self.test]
            return max(2, max(labels) + 1) if labels else 2
        return 2  # keyword / non-keyword tags


def _traced_translate(tokens: Sequence[int], spec: ToyLanguageSpec, direction: str,
                      rng: np.random.Generator) -> tuple[list[int], list[int], list[bool]]:
    """Translate and report provenance: output position -> input position, corruption flags."""
    if direction not in ("fwd", "bwd"):
        raise CorpusError("direction must be 'fwd' or 'bwd'")
    table = spec.cipher() if direction == "fwd" else spec.inverse_cipher()
    toks = list(tokens)
    if any(t < 0 or t >= spec.vocab_size for t in toks):
        raise CorpusError("token id outside vocabulary")
    out = [int(table[t]) for t in toks]
    origin = list(range(len(out)))
    for i in range(len(out) - 1):
        if rng.random() < spec.swap_rate:
            out[i], out[i + 1] = out[i + 1], out[i]
            origin[i], origin[i + 1] = origin[i + 1], origin[i]
    corrupted = [False] * len(out)
    for i in range(len(out)):
        if rng.random() < spec.noise_rate:
            out[i] = int(rng.integers(1, spec.vocab_size))
            corrupted[i] = True
    return out, origin, corrupted


def translate(tokens: Sequence[int], spec: ToyLanguageSpec, direction: str,
              rng: np.random.Generator) -> list[int]:
    """Simulated machine translation: cipher, then swaps, then corruption."""
    return _traced_translate(tokens, spec, direction, rng)[0]


def _map_tags(tags: Sequence[int], origin: Sequence[int], corrupted: Sequence[bool]) -> list[int]:
    mapped = [int(tags[o]) for o in origin]
    return [DROPPED_TAG if c else t for t, c in zip(mapped, corrupted)]


def _map_span(span: Sequence[int], origin: Sequence[int]) -> list[int]:
    start, end = span
    landed = [i for i, o in enumerate(origin) if start <= o <= end]
    return [min(landed), max(landed)]


def _make_sentence(task: TaskKind, spec: ToyLanguageSpec,
                   rng: np.random.Generator) -> tuple[list[int], object]:
    """One latent sentence (source rendering) with its gold label."""
    length = int(rng.integers(MIN_SENT_LEN, MAX_SENT_LEN + 1))
    tokens = [int(rng.integers(MIN_FILLER_ID, spec.vocab_size)) for _ in range(length)]
    if task == TaskKind.CLASSIFICATION:
        label = int(rng.integers(0, 2))
        group = KEYWORDS_A if label == 0 else KEYWORDS_B
        count = int(rng.integers(1, 3))
        for pos in rng.permutation(length)[:count]:
            tokens[pos] = int(rng.choice(group))
        return tokens, label
    if task == TaskKind.STRUCTURED:
        count = int(rng.integers(1, 5))
        slots = rng.permutation(length)[:count]
        for pos in slots:
            tokens[pos] = int(rng.choice(KEYWORDS_A + KEYWORDS_B))
        tags = [1 if t in KEYWORDS_A or t in KEYWORDS_B else 0 for t in tokens]
        return tokens, tags
    if task == TaskKind.SPAN:
        run = int(rng.integers(2, 4))
        start = int(rng.integers(0, length - run + 1))
        for pos in range(start, start + run):
            tokens[pos] = int(rng.choice(KEYWORDS_A + KEYWORDS_B))
        return tokens, [start, start + run - 1]
    raise CorpusError(f"unknown task {task!r}")


def _keyword_tags(tokens: Sequence[int]) -> list[int]:
    return [1 if t in KEYWORDS_A or t in KEYWORDS_B else 0 for t in tokens]


def gen_bundle(task: TaskKind, sizes: tuple[int, int], spec: ToyLanguageSpec,
               seed: int) -> DatasetBundle:
    """Generate the full bundle: labeled source train set, its forward
    translations (with mapped labels), their back-translations, a raw target
    test set with gold labels, and translate-test sources.

    Pure function of (task, sizes, spec, seed).
    """
    task = TaskKind(task)
    train_size, test_size = sizes
    if train_size < 1 or test_size < 1:
        raise CorpusError("sizes must be positive")
    seq = np.random.SeedSequence(seed)
    sent_rng, fwd_rng, bwd_rng, test_rng, tt_rng = (np.random.default_rng(s) for s in seq.spawn(5))
    cipher = spec.cipher()

    train: list[ParallelExample] = []
    for _ in range(train_size):
        src, gold = _make_sentence(task, spec, sent_rng)
        tgt, origin1, corr1 = _traced_translate(src, spec, "fwd", fwd_rng)
        bt, origin2, corr2 = _traced_translate(tgt, spec, "bwd", bwd_rng)
        if task == TaskKind.CLASSIFICATION:
            label: object = gold  # translation never changes the class
        elif task == TaskKind.STRUCTURED:
            tgt_tags = _map_tags(gold, origin1, corr1)
            bt_tags = _map_tags(tgt_tags, origin2, corr2)
            label = {"src": gold, "tgt": tgt_tags, "bt_src": bt_tags}
        else:
            tgt_span = _map_span(gold, origin1)
            bt_span = _map_span(tgt_span, origin2)
            label = {"src": gold, "tgt": tgt_span, "bt_src": bt_span}
        train.append(ParallelExample(src, tgt, bt, label, src_is_real=True, tgt_is_real=False))

    test: list[ParallelExample] = []
    for _ in range(test_size):
        latent, gold = _make_sentence(task, spec, test_rng)
        tgt = [int(cipher[t]) for t in latent]  # native target text: pure cipher
        tt_src = translate(tgt, spec, "bwd", tt_rng)
        if task == TaskKind.CLASSIFICATION:
            label = gold
        elif task == TaskKind.STRUCTURED:
            label = {"tgt": _keyword_tags(tgt)}
        else:
            label = {"tgt": list(gold)}
        test.append(ParallelExample(tt_src, tgt, None, label, src_is_real=False, tgt_is_real=True))

    return DatasetBundle(task=task, train=train, test=test)


def iter_batches(examples: Sequence[ParallelExample], batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[list[ParallelExample]]:
    """Deterministic batch iteration; shuffles iff an RNG is supplied."""
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    n = len(examples)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for lo in range(0, n, batch_size):
        yield [examples[int(i)] for i in order[lo:lo + batch_size]]


# ---------------------------------------------------------------------------
# JSONL persistence

_REQUIRED_FIELDS = ("split", "src", "tgt", "bt_src", "label", "provenance")


def _open(path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def save_jsonl(bundle: DatasetBundle, path) -> None:
    """One JSON object per line; records carry split/src/tgt/bt_src/label/provenance."""
    with _open(path, "w") as fh:
        for split, examples in (("train", bundle.train), ("test", bundle.test)):
            for ex in examples:
                record = {
                    "split": split,
                    "task": bundle.task.value if bundle.task else None,
                    "src": list(ex.src_tokens),
                    "tgt": list(ex.tgt_tokens),
                    "bt_src": None if ex.back_translated_src is None else list(ex.back_translated_src),
                    "label": ex.label,
                    "provenance": {"src_is_real": ex.src_is_real, "tgt_is_real": ex.tgt_is_real},
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_jsonl(path) -> DatasetBundle:
    """Inverse of :func:`save_jsonl`; malformed lines raise with their line number."""
    bundle = DatasetBundle(task=None)
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            for fld in _REQUIRED_FIELDS:
                if fld not in record:
                    raise CorpusError(f"line {lineno}: missing field {fld!r}")
            if record.get("task") is not None:
                task = TaskKind(record["task"])
                if bundle.task is None:
                    bundle.task = task
                elif bundle.task != task:
                    raise CorpusError(f"line {lineno}: mixed task kinds in one file")
            prov = record["provenance"]
            ex = ParallelExample(
                src_tokens=list(record["src"]),
                tgt_tokens=list(record["tgt"]),
                back_translated_src=None if record["bt_src"] is None else list(record["bt_src"]),
                label=record["label"],
                src_is_real=bool(prov["src_is_real"]),
                tgt_is_real=bool(prov["tgt_is_real"]),
            )
            if record["split"] == "train":
                bundle.train.append(ex)
            elif record["split"] == "test":
                bundle.test.append(ex)
            else:
                raise CorpusError(f"line {lineno}: unknown split {record['split']!r}")
    return bundle
