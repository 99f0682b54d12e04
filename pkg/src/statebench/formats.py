"""Token-level encodings of task samples and answer decoding.

Three supervision formats over a shared vocabulary (one token per group
element plus BOS/SEP/EOS/PAD):

  outcome  BOS x1..xn SEP y EOS      next-token targets, only y and EOS supervised
  cot      BOS x1..xn SEP s1..sn EOS next-token targets, s1..sn and EOS supervised
  acot     inputs x1..xn             aligned targets s1..sn, every position
                                     supervised, predictions never fed back

All encoders are pure; the batched variants fill PAD-padded matrices that the
trainer consumes directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from statebench.errors import ConfigurationError, DataError
from statebench.taskgen import GroupSpec, Sample, Split

FORMATS = ("outcome", "cot", "acot")

#: decode_answer result for predictions whose answer slot is not a group element
MALFORMED = None


@dataclass(frozen=True)
class Vocabulary:
    """Dense token ids: elements 0..order-1, then BOS, SEP, EOS, PAD."""

    order: int

    @property
    def bos(self) -> int:
        return self.order

    @property
    def sep(self) -> int:
        return self.order + 1

    @property
    def eos(self) -> int:
        return self.order + 2

    @property
    def pad(self) -> int:
        return self.order + 3

    @property
    def size(self) -> int:
        return self.order + 4

    def element_token(self, e: int) -> int:
        if not 0 <= e < self.order:
            raise DataError(f"element {e} out of range for order {self.order}")
        return e

    def token_element(self, t: int):
        """Inverse of element_token; None for special tokens."""
        return t if 0 <= t < self.order else None

    @classmethod
    def for_group(cls, group: GroupSpec) -> "Vocabulary":
        return cls(order=group.order)


@dataclass(frozen=True)
class EncodedExample:
    input_ids: np.ndarray
    target_ids: np.ndarray
    loss_mask: np.ndarray
    fmt: str

    def __post_init__(self):
        if not (len(self.input_ids) == len(self.target_ids) == len(self.loss_mask)):
            raise ConfigurationError("encoded streams must share one length")


def encoded_length(fmt: str, n: int) -> int:
    if fmt == "outcome":
        return n + 3
    if fmt == "cot":
        return 2 * n + 2
    if fmt == "acot":
        return n
    raise ConfigurationError(f"unknown format {fmt!r}")


def supervised_count(fmt: str, n: int) -> int:
    """Number of mask-true positions: 1+EOS, n+EOS, or n."""
    if fmt == "outcome":
        return 2
    if fmt == "cot":
        return n + 1
    if fmt == "acot":
        return n
    raise ConfigurationError(f"unknown format {fmt!r}")


def encode(sample: Sample, fmt: str, vocab: Vocabulary) -> EncodedExample:
    """Encode one sample; the mask marks exactly the answer tokens."""
    x = [vocab.element_token(e) for e in sample.elements]
    s = [vocab.element_token(e) for e in sample.prefix_targets]
    n = len(x)
    if fmt == "acot":
        return EncodedExample(
            input_ids=np.array(x, dtype=np.int64),
            target_ids=np.array(s, dtype=np.int64),
            loss_mask=np.ones(n, dtype=bool),
            fmt=fmt,
        )
    if fmt == "outcome":
        stream = [vocab.bos, *x, vocab.sep, s[-1], vocab.eos]
        mask = [False] * (n + 1) + [True, True]
    elif fmt == "cot":
        stream = [vocab.bos, *x, vocab.sep, *s, vocab.eos]
        mask = [False] * (n + 1) + [True] * (n + 1)
    else:
        raise ConfigurationError(f"unknown format {fmt!r}")
    stream = np.array(stream, dtype=np.int64)
    return EncodedExample(
        input_ids=stream[:-1],
        target_ids=stream[1:],
        loss_mask=np.array(mask, dtype=bool),
        fmt=fmt,
    )


@dataclass
class EncodedBatch:
    """PAD-padded matrices for a whole split, rows aligned with the split."""

    input_ids: np.ndarray  # [N, T]
    target_ids: np.ndarray  # [N, T]
    loss_mask: np.ndarray  # [N, T] bool
    sample_lengths: np.ndarray  # [N] original n per row
    enc_lengths: np.ndarray  # [N] encoded stream length per row
    fmt: str
    vocab: Vocabulary

    def __len__(self) -> int:
        return len(self.sample_lengths)


def encode_split(split: Split, fmt: str, vocab: Vocabulary) -> EncodedBatch:
    """Vectorized encode of every sample in a split."""
    if fmt not in FORMATS:
        raise ConfigurationError(f"unknown format {fmt!r}")
    lens = split.lengths
    count = len(lens)
    width = max((encoded_length(fmt, int(n)) for n in np.unique(lens)), default=0)
    inputs = np.full((count, width), vocab.pad, dtype=np.int64)
    targets = np.full((count, width), vocab.pad, dtype=np.int64)
    mask = np.zeros((count, width), dtype=bool)
    for n in np.unique(lens):
        n = int(n)
        rows = np.flatnonzero(lens == n)
        x = split.elements[rows, :n]
        s = split.targets[rows, :n]
        if fmt == "acot":
            inputs[rows, :n] = x
            targets[rows, :n] = s
            mask[rows, :n] = True
            continue
        if fmt == "outcome":
            stream = np.full((len(rows), n + 4), vocab.pad, dtype=np.int64)
            stream[:, 0] = vocab.bos
            stream[:, 1:n + 1] = x
            stream[:, n + 1] = vocab.sep
            stream[:, n + 2] = s[:, -1]
            stream[:, n + 3] = vocab.eos
            sup = [n + 1, n + 2]
        else:  # cot
            stream = np.full((len(rows), 2 * n + 3), vocab.pad, dtype=np.int64)
            stream[:, 0] = vocab.bos
            stream[:, 1:n + 1] = x
            stream[:, n + 1] = vocab.sep
            stream[:, n + 2:2 * n + 2] = s
            stream[:, 2 * n + 2] = vocab.eos
            sup = list(range(n + 1, 2 * n + 2))
        t = stream.shape[1] - 1
        inputs[np.ix_(rows, range(t))] = stream[:, :-1]
        targets[np.ix_(rows, range(t))] = stream[:, 1:]
        mask[np.ix_(rows, sup)] = True
    enc_lens = np.array([encoded_length(fmt, int(n)) for n in lens], dtype=np.int64)
    return EncodedBatch(
        input_ids=inputs,
        target_ids=targets,
        loss_mask=mask,
        sample_lengths=lens.copy(),
        enc_lengths=enc_lens,
        fmt=fmt,
        vocab=vocab,
    )


def decode_answer(predicted_tokens, fmt: str, vocab: Vocabulary):
    """Final element id from the predicted answer region, or MALFORMED.

    The answer region is the supervised stretch (outcome/cot) or the aligned
    prediction stream (acot). Malformed predictions score as incorrect.
    """
    toks = [int(t) for t in predicted_tokens]
    if not toks:
        return MALFORMED
    if fmt == "outcome":
        slot = toks[0]
    elif fmt == "cot":
        if vocab.eos in toks:
            pos = toks.index(vocab.eos)
            if pos == 0:
                return MALFORMED
            slot = toks[pos - 1]
        else:
            slot = toks[-1]  # fallback: last emitted token
    elif fmt == "acot":
        slot = toks[-1]
    else:
        raise ConfigurationError(f"unknown format {fmt!r}")
    return vocab.token_element(slot)


def chance_rate(fmt: str, group: GroupSpec) -> float:
    """Final-answer accuracy of uniform guessing over group elements."""
    if fmt not in FORMATS:
        raise ConfigurationError(f"unknown format {fmt!r}")
    return 1.0 / group.order


def format_table(group: GroupSpec | None = None) -> str:
    """Human-readable layout table, one row per format (CLI `explain-format`)."""
    rows = [
        ("format", "input stream", "targets", "supervised positions"),
        ("outcome", "BOS x1..xn SEP y", "next token", "y and EOS (2)"),
        ("cot", "BOS x1..xn SEP s1..sn", "next token", "s1..sn and EOS (n+1)"),
        ("acot", "x1..xn", "aligned s1..sn", "every position (n)"),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if group is not None:
        lines.append("")
        lines.append(
            f"vocabulary for {group.label()}: elements 0..{group.order - 1}, "
            f"BOS={group.order} SEP={group.order + 1} "
            f"EOS={group.order + 2} PAD={group.order + 3}"
        )
    return "\n".join(lines)
