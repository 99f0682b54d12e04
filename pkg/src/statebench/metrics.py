"""Sharing-factor arithmetic, out-of-distribution length evaluation, and
aggregation of persisted results into report tables.

The sharing factor compares the joint cost of learning all lengths at once
against the summed cost of learning each length alone; values above 1 mean
cross-length amortization, values below 1 destructive interference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from statebench import autodiff as ad
from statebench import models as md
from statebench.errors import ConfigurationError
from statebench.formats import (
    Vocabulary,
    decode_answer,
    chance_rate,
    encode_split,
    encoded_length,
)
from statebench.seeding import derive_key128
from statebench.taskgen import (
    GroupSpec,
    IndexPermutation,
    Split,
    _NP_DOMAIN_LIMIT,
    _decode_rows,
)

REGIME_DELTA = Fraction(1, 10)  # half-width of the "isolated" band around kappa = 1

REGIME_SHARING = "sharing"
REGIME_ISOLATED = "isolated"
REGIME_DESTRUCTIVE = "destructive"
REGIME_UNDEFINED = "undefined"


@dataclass(frozen=True)
class SharingReport:
    per_length: dict[int, int]
    joint: int | None
    kappa: Fraction | None
    regime: str
    reason: str | None = None

    @property
    def kappa_float(self) -> float | None:
        return None if self.kappa is None else float(self.kappa)


def classify_regime(kappa: Fraction, delta: Fraction = REGIME_DELTA) -> str:
    if kappa > 1 + delta:
        return REGIME_SHARING
    if kappa < 1 - delta:
        return REGIME_DESTRUCTIVE
    return REGIME_ISOLATED


def sharing_factor(per_length: dict[int, int | None],
                   joint: int | None) -> SharingReport:
    """kappa = (sum of per-length N*) / joint N*, in exact rationals."""
    missing = sorted(n for n, v in per_length.items() if v is None or v <= 0)
    if joint is None or joint <= 0 or missing:
        what = "joint" if joint is None or joint <= 0 else f"lengths {missing}"
        return SharingReport(
            per_length={n: v for n, v in per_length.items() if v},
            joint=joint if joint and joint > 0 else None,
            kappa=None,
            regime=REGIME_UNDEFINED,
            reason=f"N* undefined (not learned) for {what}",
        )
    kappa = Fraction(sum(per_length.values()), joint)
    return SharingReport(
        per_length=dict(per_length),
        joint=joint,
        kappa=kappa,
        regime=classify_regime(kappa),
    )


# ---------------------------------------------------------------------------
# OOD length generalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OodReport:
    train_max_len: int
    eval_length: int
    raw_accuracy: float | None
    chance: float
    normalized: float | None
    n_samples: int
    undefined: bool = False
    reason: str | None = None


def make_ood_split(group: GroupSpec, eval_length: int, seed: int,
                   n_samples: int = 2000) -> Split:
    """Fresh unique sequences of exactly eval_length (disjoint from any
    training data of shorter max length by construction)."""
    pool = group.order ** eval_length
    count = min(n_samples, pool)
    perm = IndexPermutation(pool, derive_key128(seed, "ood", eval_length))
    if pool > _NP_DOMAIN_LIMIT:
        idx = [perm.permute(i) for i in range(count)]
    else:
        idx = perm.permute_many(np.arange(count, dtype=np.int64))
    elements = _decode_rows(group, eval_length, idx)
    return Split(
        group=group,
        elements=elements,
        lengths=np.full(count, eval_length, dtype=np.int64),
    )


def _greedy_generate(model_spec: md.ModelSpec, consts, prompts: np.ndarray,
                     max_new: int, eos: int, pad_id: int) -> np.ndarray:
    """Batched greedy decoding; returns [B, max_new] generated ids."""
    out = np.full((prompts.shape[0], max_new), eos, dtype=np.int64)
    stream = prompts
    done = np.zeros(prompts.shape[0], dtype=bool)
    for j in range(max_new):
        logits = md.forward(model_spec, consts, stream, pad_id=pad_id)
        nxt = logits.data[:, -1, :].argmax(axis=-1)
        out[:, j] = np.where(done, eos, nxt)
        done |= nxt == eos
        if done.all():
            break
        stream = np.concatenate([stream, nxt[:, None]], axis=1)
    return out


def ood_eval(model_spec: md.ModelSpec, params: dict[str, np.ndarray],
             group: GroupSpec, fmt: str, train_max_len: int, seed: int,
             n_samples: int = 2000, chunk: int = 256) -> OodReport:
    """Accuracy at length 2x the training maximum, chance-normalized.

    outcome/cot run greedy autoregressive decoding from the prompt; acot
    reads the aligned argmax stream. Malformed decodes count as incorrect.
    """
    eval_length = 2 * train_max_len
    chance = chance_rate(fmt, group)
    if model_spec.family == "transformer":
        needed = encoded_length(fmt, eval_length)
        limit = model_spec.config.max_positions
        if needed > limit:
            return OodReport(
                train_max_len=train_max_len,
                eval_length=eval_length,
                raw_accuracy=None,
                chance=chance,
                normalized=None,
                n_samples=0,
                undefined=True,
                reason=f"needs {needed} positions, model has {limit}",
            )
    split = make_ood_split(group, eval_length, seed, n_samples)
    vocab = Vocabulary.for_group(group)
    consts = {k: ad.constant(v) for k, v in params.items()}
    hits = 0
    for start in range(0, len(split), chunk):
        rows = slice(start, min(start + chunk, len(split)))
        x = split.elements[rows, :eval_length]
        finals = split.targets[rows, eval_length - 1]
        if fmt == "acot":
            logits = md.forward(model_spec, consts, x, pad_id=vocab.pad)
            preds = logits.data.argmax(axis=-1)
            answers = [decode_answer(p, fmt, vocab) for p in preds]
        else:
            bos = np.full((x.shape[0], 1), vocab.bos, dtype=np.int64)
            sep = np.full((x.shape[0], 1), vocab.sep, dtype=np.int64)
            prompts = np.concatenate([bos, x, sep], axis=1)
            max_new = 2 if fmt == "outcome" else eval_length + 1
            gen = _greedy_generate(model_spec, consts, prompts, max_new,
                                   vocab.eos, vocab.pad)
            answers = [decode_answer(_strip_eos(row, vocab.eos), fmt, vocab)
                       for row in gen]
        hits += sum(1 for a, want in zip(answers, finals) if a == int(want))
    raw = hits / len(split)
    normalized = (raw - chance) / (1.0 - chance)
    return OodReport(
        train_max_len=train_max_len,
        eval_length=eval_length,
        raw_accuracy=raw,
        chance=chance,
        normalized=normalized,
        n_samples=len(split),
    )


def _strip_eos(tokens: np.ndarray, eos: int) -> list[int]:
    """Generated ids up to and including the first EOS."""
    out = []
    for t in tokens:
        out.append(int(t))
        if t == eos:
            break
    return out


# ---------------------------------------------------------------------------
# Result aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellKey:
    model: str
    fmt: str
    length_dist: str
    group_label: str
    max_len: int


@dataclass
class CellValue:
    n_star: int | None
    status: str  # found | not_learned | budget_exhausted_best_so_far | ...
    trace_id: str


@dataclass
class ResultTable:
    cells: dict[CellKey, CellValue] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def aggregate_table(entries: list[dict]) -> ResultTable:
    """Collapse persisted trace records into one cell per configuration.

    Conflicting duplicates keep the lower N* (best-observed semantics) and
    leave a warning.
    """
    table = ResultTable()
    for obj in entries:
        if obj.get("kind") != "trace" or "cell" not in obj:
            continue
        cell = obj["cell"]
        key = CellKey(
            model=cell["model"],
            fmt=cell["format"],
            length_dist=cell["length_dist"],
            group_label=cell["group"],
            max_len=int(cell["max_len"]),
        )
        value = CellValue(
            n_star=obj.get("best"),
            status=obj.get("outcome", "unknown"),
            trace_id=obj.get("trace_id", ""),
        )
        if key in table.cells:
            old = table.cells[key]
            keep, drop = old, value
            if _better(value, old):
                keep, drop = value, old
            table.warnings.append(
                f"duplicate cell {key}: keeping N*={keep.n_star} "
                f"({keep.trace_id or 'n/a'}), dropping N*={drop.n_star}"
            )
            table.cells[key] = keep
        else:
            table.cells[key] = value
    return table


def _better(a: CellValue, b: CellValue) -> bool:
    if a.n_star is None:
        return False
    if b.n_star is None:
        return True
    return a.n_star < b.n_star


def render_csv(table: ResultTable) -> str:
    lines = ["model,format,length_dist,modulus_or_group,L,n_star,status,trace_id"]
    for key in sorted(table.cells, key=lambda k: (
            k.model, k.fmt, k.length_dist, k.group_label, k.max_len)):
        v = table.cells[key]
        n = "" if v.n_star is None else str(v.n_star)
        lines.append(
            f"{key.model},{key.fmt},{key.length_dist},{key.group_label},"
            f"{key.max_len},{n},{v.status},{v.trace_id}"
        )
    return "\n".join(lines) + "\n"


def render_text(table: ResultTable) -> str:
    """Aligned text grid: rows model/format/group, columns dist x L."""
    dists = sorted({k.length_dist for k in table.cells})
    lens = sorted({k.max_len for k in table.cells})
    row_keys = sorted({(k.model, k.fmt, k.group_label) for k in table.cells})
    header = ["model", "format", "group"] + [
        f"{d}/L{l}" for d in dists for l in lens
    ]
    rows = [header]
    for model, fmt, group_label in row_keys:
        row = [model, fmt, group_label]
        for d in dists:
            for l in lens:
                v = table.cells.get(CellKey(model, fmt, d, group_label, l))
                if v is None:
                    row.append("")
                elif v.n_star is None:
                    row.append("-")
                else:
                    row.append(str(v.n_star))
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    out = []
    for i, row in enumerate(rows):
        out.append("  ".join(c.rjust(w) if i and j >= 3 else c.ljust(w)
                             for j, (c, w) in enumerate(zip(row, widths))).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def render_long(table: ResultTable) -> str:
    """Plot-ready long format: x (max length), y (N*), series label."""
    lines = ["x,y,series"]
    for key in sorted(table.cells, key=lambda k: (
            k.model, k.fmt, k.length_dist, k.group_label, k.max_len)):
        v = table.cells[key]
        if v.n_star is None:
            continue
        series = f"{key.model}/{key.fmt}/{key.length_dist}/{key.group_label}"
        lines.append(f"{key.max_len},{v.n_star},{series}")
    return "\n".join(lines) + "\n"
